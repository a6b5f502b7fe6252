"""Tables, significance report and figure data built from finished experiment directories.

Everything here reads the files written by the ``train`` and ``evaluate``
commands; nothing is recomputed from images except foreground percentages.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .evaluation_stats import EVAL_SPLITS, METHODS, MethodScores, aggregate, benefit_vs_foreground
from .training import ROLES, read_kv, read_run_dir

SPLIT_FILE = {"validation": "table3_validation.csv", "test": "table4_test.csv"}


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
    tmp.replace(path)


def read_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return v


def organ_dirs(output_root) -> List[Path]:
    root = Path(output_root)
    return sorted(p for p in root.iterdir() if (p / "scores" / "per_run.csv").is_file()) if root.is_dir() else []


def load_method_scores(organ_dir: Path) -> List[MethodScores]:
    cells: Dict[tuple, list] = defaultdict(list)
    for row in read_csv(organ_dir / "scores" / "per_run.csv"):
        cells[(row["method"], row["split"])].append((int(row["run"]), float(row["mean_dice"])))
    return [MethodScores(organ_dir.name, m, s, [d for _, d in sorted(v)]) for (m, s), v in sorted(cells.items())]


def role_runs(organ_dir: Path, role: str):
    runs = []
    base = organ_dir / role
    if not base.is_dir():
        return runs
    for d in sorted(base.glob("run_*"), key=lambda p: int(p.name.split("_")[1])):
        r = read_run_dir(d)
        if r is not None:
            runs.append(r)
    return runs


def split_rows(organ_dir: Path) -> List[dict]:
    man = json.loads((organ_dir / "data" / "manifest.json").read_text())
    return [{"organ": organ_dir.name, **man["counts"]}]


def train_time_rows(organ_dir: Path) -> List[dict]:
    row = {"organ": organ_dir.name}
    for role in ROLES:
        runs = [r for r in role_runs(organ_dir, role) if r.converged]
        row[f"{role}_minutes"] = float(np.mean([r.total_minutes for r in runs])) if runs else math.nan
        row[f"{role}_epoch_seconds"] = float(np.mean([r.mean_epoch_seconds for r in runs])) if runs else math.nan
    return [row]


def convergence_rows(organ_dir: Path) -> List[dict]:
    rows = []
    for role in ROLES:
        runs = role_runs(organ_dir, role)
        if not runs:
            continue
        n_conv = sum(r.converged for r in runs)
        rows.append({"organ": organ_dir.name, "role": role, "attempts": len(runs), "converged": n_conv,
                     "convergence_rate": n_conv / len(runs)})
    return rows


def curve_rows(organ_dir: Path) -> List[dict]:
    rows = []
    for role in ROLES:
        for r in role_runs(organ_dir, role):
            if not r.converged:
                continue
            for e in r.epoch_records:
                rows.append({"organ": organ_dir.name, "role": role, "run": r.run_index, "epoch": e.epoch,
                             "train_dice": e.train_dice, "val_dice": e.val_dice})
    return rows


def significance_text(rows: List[dict]) -> str:
    lines = ["Two-sided t-tests on per-run mean dice (pooled variance).", ""]
    for r in rows:
        if r["method"] == "baseline":
            continue
        parts = [f"{r['organ']:<12} {r['split']:<10} {r['method']:<13} {r['cell']}"]
        for key, label in (("p_vs_baseline", "vs baseline"), ("p_vs_two_stage", "vs two_stage")):
            p = r.get(key, math.nan)
            if not math.isnan(p):
                parts.append(f"{label}: p={p:.3g}")
        if r["sig_0.001"]:
            parts.append("** above baseline (p<0.001)")
        elif r["sig_0.05"]:
            parts.append("* above baseline (p<0.05)")
        lines.append("  ".join(parts))
    return "\n".join(lines) + "\n"


def _plots(report_dir: Path, curves, conv, benefit) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if curves:
        keys = sorted({(r["organ"], r["role"]) for r in curves})
        fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3), squeeze=False)
        for ax, (organ, role) in zip(axes[0], keys):
            sub = [r for r in curves if r["organ"] == organ and r["role"] == role]
            for run in sorted({r["run"] for r in sub}):
                pts = [r for r in sub if r["run"] == run]
                ax.plot([p["epoch"] for p in pts], [p["val_dice"] for p in pts], lw=1)
                ax.plot([p["epoch"] for p in pts], [p["train_dice"] for p in pts], lw=0.5, ls="--")
            ax.set_title(f"{organ} {role}")
            ax.set_xlabel("epoch")
            ax.set_ylim(0, 1)
        axes[0][0].set_ylabel("dice")
        fig.tight_layout()
        fig.savefig(report_dir / "training_curves.png", dpi=100)
        plt.close(fig)

    if conv:
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [f"{r['organ']}\n{r['role']}" for r in conv]
        ax.bar(range(len(conv)), [r["convergence_rate"] for r in conv])
        ax.set_xticks(range(len(conv)), labels, fontsize=7)
        ax.set_ylabel("convergence rate")
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(report_dir / "convergence_rate.png", dpi=100)
        plt.close(fig)

    if benefit:
        fig, ax = plt.subplots(figsize=(4, 3))
        for key, marker in (("two_stage_benefit", "o"), ("gt_localised_benefit", "x")):
            ax.scatter([r["foreground_percent"] for r in benefit], [r[key] for r in benefit],
                       marker=marker, label=key.replace("_benefit", ""))
        for r in benefit:
            ax.annotate(r["organ"], (r["foreground_percent"], r["gt_localised_benefit"]), fontsize=7)
        ax.set_xlabel("foreground %")
        ax.set_ylabel("mean dice improvement")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(report_dir / "benefit_vs_foreground.png", dpi=100)
        plt.close(fig)


def build_report(output_root, report_dir=None, equal_var: bool = True, plots: bool = True) -> Path:
    """Render every table and figure-data file for all evaluated organs under ``output_root``."""
    dirs = organ_dirs(output_root)
    if not dirs:
        raise FileNotFoundError(f"no evaluated organs under {output_root}")
    report_dir = Path(report_dir or Path(output_root) / "report")
    report_dir.mkdir(parents=True, exist_ok=True)

    scores, splits, times, conv, curves, fg = [], [], [], [], [], {}
    for d in dirs:
        scores += load_method_scores(d)
        if (d / "data" / "manifest.json").is_file():
            splits += split_rows(d)
        times += train_time_rows(d)
        conv += convergence_rows(d)
        curves += curve_rows(d)
        fg_file = d / "data" / "foreground.txt"
        if fg_file.is_file():
            fg[d.name] = float(read_kv(fg_file)["mean_foreground_percent"])

    write_csv(report_dir / "table1_splits.csv", splits, ["organ", "train", "val", "test"])
    write_csv(report_dir / "table2_train_time.csv", times,
              ["organ"] + [f"{r}_minutes" for r in ROLES] + [f"{r}_epoch_seconds" for r in ROLES])

    methods = [m for m in METHODS if any(s.method == m for s in scores)]
    rows = aggregate(scores, methods=methods, equal_var=equal_var)
    cols = ["organ", "split", "method", "n_runs", "mean", "std", "cell", "p_vs_baseline", "p_vs_two_stage",
            "sig_0.05", "sig_0.001", "bold"]
    for split in EVAL_SPLITS:
        write_csv(report_dir / SPLIT_FILE[split], [r for r in rows if r["split"] == split], cols)
    (report_dir / "significance.txt").write_text(significance_text(rows), encoding="utf-8")

    write_csv(report_dir / "fig_training_curves.csv", curves,
              ["organ", "role", "run", "epoch", "train_dice", "val_dice"])
    write_csv(report_dir / "fig_convergence.csv", conv, ["organ", "role", "attempts", "converged", "convergence_rate"])
    benefit = []
    if set(methods) == set(METHODS) and fg:
        for split in EVAL_SPLITS:
            have = {s.organ for s in scores if s.split == split}
            benefit += benefit_vs_foreground(scores, {o: v for o, v in fg.items() if o in have}, split)
    write_csv(report_dir / "fig_benefit.csv", benefit,
              ["organ", "split", "foreground_percent", "two_stage_benefit", "gt_localised_benefit"])
    if plots:
        _plots(report_dir, curves, conv, [b for b in benefit if b["split"] == "test"])
    return report_dir
