"""Command-line driver: synth, prepare, train, evaluate, report (and pipeline for all of them).

Layout under ``<output_root>/<organ>/``::

    data/manifest.json            full-resolution split
    data/lowres/, data/cropped/   derived datasets with their own manifests
    <role>/run_<i>/               epochs.csv, best.pt, summary.txt per training run
    <role>/convergence.txt        attempts and convergence rate
    scores/per_case.csv           dice per (method, split, run, case) plus crop box / fallback
    scores/per_run.csv            mean dice per (method, split, run)
    predictions/<method>/run_<i>/<split>/<case>.nii.gz
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import synth
from .config import ExperimentConfig, preset_path
from .dataset_io import (
    SplitManifest,
    build_cropped_dataset,
    build_lowres_dataset,
    list_msd_cases,
    load_msd_case,
    read_nifti,
    split_dataset,
    write_nifti,
)
from .evaluation_stats import dice
from .inference import baseline_segment, gt_localised_segment, pair_runs, two_stage_segment
from .reporting import build_report, write_csv
from .training import ROLES, AttemptCapExceeded, repeat_until_converged
from .unet3d import load_checkpoint
from .volume_ops import foreground_percent

logger = logging.getLogger("locseg")

EVAL_SPLIT_NAMES = {"validation": "val", "test": "test"}


class StageError(RuntimeError):
    """A pipeline stage could not complete; the message names the failing case or run."""


# ------------------------------------------------------------------ stages


def cmd_synth(config: ExperimentConfig, force: bool = False) -> Path:
    if not config.synth:
        raise StageError("config has no synth section")
    root = Path(config.data_root)
    if (root / "dataset.json").is_file() and not force:
        logger.info("synthetic task already present at %s", root)
        return root
    s = dict(config.synth)
    synth.write_task(root, n_cases=s.pop("n_cases"), shape=tuple(s.pop("shape", (32, 64, 64))),
                     fg_percent=s.pop("fg_percent", 0.3), seed=s.pop("seed", 0), name=config.organ, **s)
    logger.info("wrote synthetic task to %s", root)
    return root


def _manifest_paths(config: ExperimentConfig):
    data = config.organ_root / "data"
    return data / "manifest.json", data / "lowres" / "manifest.json", data / "cropped" / "manifest.json"


def cmd_prepare(config: ExperimentConfig, force: bool = False):
    """Split the task and build the low-resolution and cropped datasets."""
    if not config.data_root:
        raise StageError("no data root: set data_root in the config or LOCSEG_DATA_ROOT")
    full_p, low_p, crop_p = _manifest_paths(config)
    if all(p.is_file() for p in (full_p, low_p, crop_p)) and not force:
        logger.info("datasets already prepared under %s", full_p.parent)
        return tuple(SplitManifest.load(p) for p in (full_p, low_p, crop_p))

    try:
        cases = list_msd_cases(config.data_root, config.case_subset)
    except Exception as exc:
        raise StageError(str(exc)) from exc
    manifest = split_dataset(cases, seed=config.split_seed, organ=config.organ,
                             override_counts=config.split_counts)
    manifest.save(full_p)
    logger.info("split %s: train/val/test = %s", config.organ, manifest.counts)

    fg = []
    for rec in cases:
        fg.append(foreground_percent(read_nifti(rec.label)[0] > 0))
    (full_p.parent / "foreground.txt").write_text(
        f"mean_foreground_percent: {np.mean(fg):.6f}\ncases: {len(fg)}\n")

    try:
        low = build_lowres_dataset(manifest, low_p.parent, channel_policy=config.channel_policy,
                                   workers=config.workers)
        crop = build_cropped_dataset(manifest, out_root=crop_p.parent, margin=config.margin,
                                     channel_policy=config.channel_policy, workers=config.workers)
    except Exception as exc:
        raise StageError(f"building derived datasets failed: {exc}") from exc
    return manifest, low, crop


def _role_manifest(config: ExperimentConfig, role: str) -> SplitManifest:
    full_p, low_p, crop_p = _manifest_paths(config)
    path = {"baseline": full_p, "lowres": low_p, "organ": crop_p}[role]
    if not path.is_file():
        raise StageError(f"missing {path}; run prepare first")
    return SplitManifest.load(path)


def cmd_train(config: ExperimentConfig, role: str):
    """Train ``role`` networks until ``n_runs`` have converged (completed runs are reused)."""
    manifest = _role_manifest(config, role)
    out_dir = config.organ_root / role
    try:
        results, rate = repeat_until_converged(config.train_config(role), manifest, n=config.n_runs,
                                               max_attempts=config.max_attempts, out_dir=out_dir)
    except AttemptCapExceeded as exc:
        _write_convergence(out_dir, role, exc.results)
        raise StageError(str(exc)) from exc
    _write_convergence(out_dir, role, results)
    logger.info("%s: %d attempts, convergence rate %.2f", role, len(results), rate)
    return results, rate


def _write_convergence(out_dir: Path, role: str, results) -> None:
    n_conv = sum(r.converged for r in results)
    conv = [r for r in results if r.converged]
    lines = {
        "role": role,
        "attempts": len(results),
        "converged": n_conv,
        "convergence_rate": f"{n_conv / len(results):.6f}" if results else "nan",
        "mean_minutes_converged": f"{np.mean([r.total_minutes for r in conv]):.4f}" if conv else "nan",
        "converged_runs": " ".join(str(r.run_index) for r in conv),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "convergence.txt").write_text("".join(f"{k}: {v}\n" for k, v in lines.items()))


def _converged_models(config: ExperimentConfig, role: str):
    """Best checkpoints of the converged runs of ``role``, in chronological order."""
    from .reporting import role_runs

    runs = [r for r in role_runs(config.organ_root, role) if r.converged]
    if not runs:
        raise StageError(f"no converged {role} runs under {config.organ_root / role}; run train first")
    models = []
    for r in runs[: config.n_runs]:
        path = config.organ_root / role / f"run_{r.run_index}" / "best.pt"
        if not path.is_file():
            raise StageError(f"{role} run_{r.run_index}: missing checkpoint {path}")
        net, _ = load_checkpoint(path, device=config.device)
        net.eval()
        models.append((r.run_index, net))
    return models


def cmd_evaluate(config: ExperimentConfig, force: bool = False) -> Path:
    """Score every method on the validation and test splits at full resolution."""
    scores_dir = config.organ_root / "scores"
    if (scores_dir / "per_run.csv").is_file() and not force:
        logger.info("scores already present in %s", scores_dir)
        return scores_dir
    manifest = _role_manifest(config, "baseline")

    pipelines = {}
    if "baseline" in config.methods:
        pipelines["baseline"] = [(i, lambda v, m, net=net: baseline_segment(net, v))
                                 for i, net in _converged_models(config, "baseline")]
    organ_models = None
    if "gt_localised" in config.methods or "two_stage" in config.methods:
        organ_models = _converged_models(config, "organ")
    if "gt_localised" in config.methods:
        pipelines["gt_localised"] = [
            (i, lambda v, m, net=net: gt_localised_segment(net, v, m, config.margin)) for i, net in organ_models]
    if "two_stage" in config.methods:
        loc_models = _converged_models(config, "lowres")
        try:
            pairs = pair_runs(loc_models, organ_models)
        except ValueError as exc:
            raise StageError(f"{config.organ}: {exc}") from exc
        pipelines["two_stage"] = [
            (k, lambda v, m, a=loc, b=org: two_stage_segment(a, b, v, config.margin))
            for k, ((_, loc), (_, org)) in enumerate(pairs)]

    per_case, per_run = [], []
    for split, key in EVAL_SPLIT_NAMES.items():
        for rec in manifest.split(key):
            try:
                image, label = load_msd_case(rec.image, rec.label, config.channel_policy)
            except Exception as exc:
                raise StageError(f"case {rec.case_id}: {exc}") from exc
            for method, runs in pipelines.items():
                for run, segment in runs:
                    out = segment(image.voxels, label.voxels)
                    d = dice(out.mask, label.voxels)
                    per_case.append({"method": method, "split": split, "run": run, "case_id": rec.case_id,
                                     "dice": d, "used_fallback": str(out.used_fallback).lower(),
                                     "crop_bbox": "" if out.crop_bbox is None else str(out.crop_bbox.to_list())})
                    if config.save_predictions:
                        dest = (config.organ_root / "predictions" / method / f"run_{run}" / split
                                / f"{rec.case_id}.nii.gz")
                        write_nifti(dest, out.mask.astype(np.uint8), affine=image.affine, spacing=image.spacing)
    for method, runs in pipelines.items():
        for run, _ in runs:
            for split in EVAL_SPLIT_NAMES:
                vals = [r["dice"] for r in per_case
                        if r["method"] == method and r["run"] == run and r["split"] == split]
                if vals:
                    per_run.append({"method": method, "split": split, "run": run,
                                    "mean_dice": float(np.mean(vals)), "n_cases": len(vals)})
    write_csv(scores_dir / "per_case.csv", per_case,
              ["method", "split", "run", "case_id", "dice", "used_fallback", "crop_bbox"])
    # written last: marks evaluation as complete
    write_csv(scores_dir / "per_run.csv", per_run, ["method", "split", "run", "mean_dice", "n_cases"])
    return scores_dir


def cmd_report(config: ExperimentConfig, welch: bool = False) -> Path:
    return build_report(config.output_root, equal_var=not welch)


def cmd_pipeline(config: ExperimentConfig, welch: bool = False) -> Path:
    if config.synth:
        cmd_synth(config)
    cmd_prepare(config)
    for role in config.roles:
        cmd_train(config, role)
    cmd_evaluate(config)
    return cmd_report(config, welch)


# ------------------------------------------------------------------ argument parsing


def _load_config(args) -> ExperimentConfig:
    path = args.config or preset_path(args.preset)
    overrides = {
        "organ": args.organ,
        "data_root": args.data_root,
        "output_root": args.output_root,
        "device": args.device,
        "n_runs": args.n_runs,
        "seed": args.seed,
    }
    if getattr(args, "methods", None):
        overrides["methods"] = args.methods
    return ExperimentConfig.load(path, **overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="locseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--preset", default="desk", choices=["desk", "full"],
                        help="bundled config used when --config is not given")
        sp.add_argument("--organ")
        sp.add_argument("--data-root", help="MSD task directory (default: $LOCSEG_DATA_ROOT)")
        sp.add_argument("--output-root")
        sp.add_argument("--device")
        sp.add_argument("--n-runs", type=int, help="converged runs required per network role")
        sp.add_argument("--seed", type=int, help="first training seed")
        return sp

    s = common(sub.add_parser("synth", help="write the configured synthetic task"))
    s.add_argument("--force", action="store_true")
    s = common(sub.add_parser("prepare", help="split and build low-res and cropped datasets"))
    s.add_argument("--force", action="store_true")
    s = common(sub.add_parser("train", help="train networks until n runs converge"))
    s.add_argument("--role", action="append", choices=ROLES,
                   help="network role to train (repeatable; default: all roles the methods need)")
    s = common(sub.add_parser("evaluate", help="score all methods on validation and test"))
    s.add_argument("--method", dest="methods", action="append",
                   choices=["baseline", "two_stage", "gt_localised"])
    s.add_argument("--force", action="store_true")
    for name, text in (("report", "render tables, significance text and plots"),
                       ("pipeline", "synth (if configured), prepare, train, evaluate, report")):
        s = common(sub.add_parser(name, help=text))
        s.add_argument("--welch", action="store_true", help="unequal-variance t-tests instead of pooled")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args)
        if args.command == "synth":
            cmd_synth(config, args.force)
        elif args.command == "prepare":
            cmd_prepare(config, args.force)
        elif args.command == "train":
            for role in args.role or config.roles:
                cmd_train(config, role)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.force)
        elif args.command == "report":
            print(cmd_report(config, args.welch))
        elif args.command == "pipeline":
            print(cmd_pipeline(config, args.welch))
    except (StageError, FileNotFoundError, ValueError, KeyError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
