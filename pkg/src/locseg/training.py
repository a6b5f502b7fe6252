"""Patch sampling, the combined dice/cross-entropy loss and the training protocol.

The protocol: Adam, validation dice after every epoch, a checkpoint only on a
strict improvement, early stopping after ``patience`` epochs without one, and
a convergence gate that abandons a run whose validation dice is still below
``min_val_dice`` at epoch ``by_epoch``.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .dataset_io import SplitManifest, load_split_arrays
from .evaluation_stats import dice
from .inference import prepare_input, segment_whole, sliding_window_segment
from .unet3d import UNet3D, UNetConfig, init_params, save_checkpoint

logger = logging.getLogger(__name__)

ROLES = ("baseline", "lowres", "organ")
SOFT_DICE_EPS = 1e-5


class TrainingError(RuntimeError):
    pass


class AttemptCapExceeded(TrainingError):
    def __init__(self, message, results):
        super().__init__(message)
        self.results = results


@dataclass
class TrainConfig:
    role: str = "baseline"
    learning_rate: float = 1e-4
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (64, 256, 256)
    patience: int = 20
    fg_bias: float = 0.8
    min_val_dice: float = 0.1
    by_epoch: int = 20
    max_epochs: int = 1000
    samples_per_epoch: Optional[int] = None  # defaults to the number of training cases
    seed: int = 0
    base_channels: int = 32
    depth: int = 3
    groups_per_norm: int = 8
    zscore: bool = True
    device: str = "cpu"

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not 0.0 <= self.fg_bias <= 1.0:
            raise ValueError("fg_bias must lie in [0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")

    def unet_config(self, in_channels: int = 1) -> UNetConfig:
        return UNetConfig(in_channels=in_channels, base_channels=self.base_channels, depth=self.depth,
                          groups_per_norm=self.groups_per_norm, patch_size=self.patch_size,
                          zscore=self.zscore)


@dataclass
class EpochRecord:
    epoch: int
    train_dice: float
    val_dice: float
    seconds: float


@dataclass
class RunResult:
    run_index: int
    seed: int
    epoch_records: List[EpochRecord] = field(default_factory=list)
    converged: bool = False
    total_minutes: float = 0.0
    best_val_dice: float = 0.0
    best_epoch: int = 0
    checkpoint: Optional[str] = None
    stop_reason: str = ""
    model: Optional[UNet3D] = field(default=None, repr=False, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.epoch_records)

    @property
    def mean_epoch_seconds(self) -> float:
        if not self.epoch_records:
            return 0.0
        return float(np.mean([r.seconds for r in self.epoch_records]))


# ---------------------------------------------------------------- sampling


def _pad_to(vol: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    pad = [(0, 0)] * (vol.ndim - 3) + [(0, max(0, p - s)) for p, s in zip(shape, vol.shape[-3:])]
    return np.pad(vol, pad) if any(p[1] for p in pad) else vol


def sample_patch(image: np.ndarray, label: np.ndarray, patch_size: Sequence[int],
                 rng: np.random.Generator, fg_bias: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    """Draw one training patch.

    With probability ``fg_bias`` the patch is centred on a random foreground
    voxel (clamped to the volume), otherwise its corner is uniform. Volumes
    smaller than ``patch_size`` are zero padded. ``image`` may carry a
    leading channel axis.
    """
    patch_size = tuple(int(p) for p in patch_size)
    if any(p < 1 for p in patch_size):
        raise ValueError("patch_size must be positive on every axis")
    image = _pad_to(np.asarray(image), patch_size)
    label = _pad_to(np.asarray(label), patch_size)
    shape = label.shape

    start = None
    if rng.random() < fg_bias:
        fg = np.flatnonzero(label)
        if fg.size:
            centre = np.unravel_index(fg[rng.integers(fg.size)], shape)
            start = [min(max(c - p // 2, 0), s - p) for c, p, s in zip(centre, patch_size, shape)]
    if start is None:
        start = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch_size)]

    sl = tuple(slice(a, a + p) for a, p in zip(start, patch_size))
    return image[(Ellipsis,) + sl], label[sl]


# ---------------------------------------------------------------- loss


def soft_dice(logits: torch.Tensor, target: torch.Tensor, eps: float = SOFT_DICE_EPS) -> torch.Tensor:
    p_fg = torch.softmax(logits, dim=1)[:, 1]
    g = target.to(p_fg.dtype)
    return (2 * (p_fg * g).sum() + eps) / (p_fg.sum() + g.sum() + eps)


def combined_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus ``1 - soft dice`` of the foreground class, unit weights.

    ``logits`` is (batch, 2, *spatial); ``target`` is (batch, *spatial) in {0, 1}.
    """
    if logits.ndim != target.ndim + 1 or logits.shape[0] != target.shape[0] \
            or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not agree")
    ce = F.cross_entropy(logits, target.long())
    return ce + (1.0 - soft_dice(logits, target))


# ---------------------------------------------------------------- validation


def validate(params: UNet3D, val_cases, role: str) -> float:
    """Mean per-case dice of ``params`` over ``val_cases`` of (image, label) pairs.

    The baseline segments full volumes by sliding window; the low-res and
    organ networks see each whole (padded) volume at once.
    """
    if not len(val_cases):
        raise ValueError("validation set is empty")
    scores = []
    for image, label in val_cases:
        if role == "baseline":
            pred = sliding_window_segment(params, image, params.config.patch_size)
        else:
            pred = segment_whole(params, image)
        scores.append(dice(pred, label))
    return float(np.mean(scores))


# ---------------------------------------------------------------- protocol


def fit_protocol(train_epoch: Callable[[int], float], validate_epoch: Callable[[int], float],
                 config: TrainConfig, on_improve: Optional[Callable[[int, float], None]] = None,
                 result: Optional[RunResult] = None) -> RunResult:
    """Run epochs under the checkpoint / early-stopping / convergence rules.

    ``train_epoch(epoch)`` returns the epoch's training dice and
    ``validate_epoch(epoch)`` its validation dice. ``on_improve`` is called
    on every strict improvement (where the checkpoint gets written).
    """
    result = result or RunResult(run_index=0, seed=config.seed)
    best, best_epoch = -math.inf, 0
    t_run = time.perf_counter()
    result.stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        train_dice = train_epoch(epoch)
        val_dice = validate_epoch(epoch)
        result.epoch_records.append(EpochRecord(epoch, float(train_dice), float(val_dice),
                                                time.perf_counter() - t0))
        if not (math.isfinite(train_dice) and math.isfinite(val_dice)):
            result.stop_reason = "non_finite"
            break
        if val_dice > best:
            best, best_epoch = val_dice, epoch
            if on_improve is not None:
                on_improve(epoch, val_dice)
        if epoch == config.by_epoch and best < config.min_val_dice:
            result.stop_reason = "not_converged"
            break
        if epoch - best_epoch >= config.patience:
            result.stop_reason = "patience"
            break

    result.best_val_dice = float(max(best, 0.0))
    result.best_epoch = best_epoch
    if result.stop_reason == "non_finite":
        result.converged = False
    elif result.stop_reason == "not_converged":
        result.converged = False
    else:
        # runs shorter than by_epoch are judged on their best dice
        result.converged = result.best_val_dice >= config.min_val_dice
    result.total_minutes = (time.perf_counter() - t_run) / 60.0
    return result


def train_model(config: TrainConfig, train_cases, val_cases, run_index: int = 0,
                run_dir=None) -> RunResult:
    """Train one network on in-memory cases of (image, label) arrays.

    The returned result holds the best-validation model in ``result.model``;
    with ``run_dir`` set, checkpoints and the epoch log are written there.
    """
    if not len(train_cases):
        raise TrainingError("no training cases")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    first = np.asarray(train_cases[0][0])
    in_ch = first.shape[0] if first.ndim == 4 else 1
    ucfg = config.unet_config(in_ch)
    net = init_params(ucfg, config.seed).to(config.device)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    train_inputs = [(prepare_input(img, ucfg), np.asarray(lab, dtype=np.uint8)) for img, lab in train_cases]
    n_samples = config.samples_per_epoch or len(train_inputs)
    best_state = {}
    ckpt_path = Path(run_dir) / "best.pt" if run_dir is not None else None

    def train_epoch(epoch):
        net.train()
        inter = total = 0.0
        drawn = 0
        while drawn < n_samples:
            bs = min(config.batch_size, n_samples - drawn)
            xs, ys = [], []
            for _ in range(bs):
                img, lab = train_inputs[int(rng.integers(len(train_inputs)))]
                x, y = sample_patch(img, lab, config.patch_size, rng, config.fg_bias)
                xs.append(x)
                ys.append(y)
            drawn += bs
            x = torch.from_numpy(np.stack(xs)).to(config.device)
            y = torch.from_numpy(np.stack(ys).astype(np.int64)).to(config.device)
            logits = net(x)
            loss = combined_loss(logits, y)
            if not torch.isfinite(loss):
                return math.nan
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                pred = logits.argmax(1)
                inter += float(((pred == 1) & (y == 1)).sum())
                total += float((pred == 1).sum() + (y == 1).sum())
        # aggregate dice over every patch of the epoch
        return 1.0 if total == 0 else 2 * inter / total

    def validate_epoch(epoch):
        net.eval()
        with torch.no_grad():
            return validate(net, val_cases, config.role)

    def on_improve(epoch, val_dice):
        best_state["state"] = {k: v.detach().clone() for k, v in net.state_dict().items()}
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, net, epoch, val_dice, role=config.role, seed=config.seed)

    result = RunResult(run_index=run_index, seed=config.seed)
    fit_protocol(train_epoch, validate_epoch, config, on_improve, result)
    if "state" in best_state:
        net.load_state_dict(best_state["state"])
        if ckpt_path is not None:
            result.checkpoint = str(ckpt_path)
    net.eval()
    result.model = net
    if run_dir is not None:
        write_run_dir(run_dir, result, config)
    return result


def role_manifest_check(config: TrainConfig, manifest: SplitManifest) -> None:
    expected = {"baseline": "full", "lowres": "lowres", "organ": "cropped"}[config.role]
    if manifest.kind != expected:
        raise TrainingError(f"role {config.role!r} needs a {expected!r} manifest, got {manifest.kind!r}")


def run_training(config: TrainConfig, manifest: SplitManifest, run_dir=None, run_index: int = 0,
                 channel_policy: str = "first", _cache: Optional[dict] = None) -> RunResult:
    """Load the manifest's train/val cases and train one network for ``config.role``."""
    role_manifest_check(config, manifest)
    cache = _cache if _cache is not None else {}
    if "train" not in cache:
        try:
            cache["train"] = [(i, l) for _, i, l in load_split_arrays(manifest.train, channel_policy)]
            cache["val"] = [(i, l) for _, i, l in load_split_arrays(manifest.val, channel_policy)]
        except (OSError, ValueError) as exc:
            raise TrainingError(f"cannot load dataset for role {config.role}: {exc}") from exc
    return train_model(config, cache["train"], cache["val"], run_index=run_index, run_dir=run_dir)


def repeat_until_converged(config: TrainConfig, manifest, n: int = 10, max_attempts: int = 50,
                           run_fn: Optional[Callable] = None, out_dir=None):
    """Launch runs with seeds ``seed, seed+1, ...`` until ``n`` have converged.

    Returns ``(results, convergence_rate)`` where ``results`` holds every
    attempt and the rate is ``n / attempts``. Completed run directories under
    ``out_dir`` are reloaded rather than retrained.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    cache: dict = {}
    if run_fn is None:
        def run_fn(cfg, man, run_dir=None, run_index=0):
            return run_training(cfg, man, run_dir=run_dir, run_index=run_index, _cache=cache)

    results: List[RunResult] = []
    attempt = 0
    while sum(r.converged for r in results) < n:
        if attempt >= max_attempts:
            raise AttemptCapExceeded(
                f"{config.role}: only {sum(r.converged for r in results)} of {n} runs converged "
                f"after {attempt} attempts", results)
        cfg = TrainConfig(**{**asdict(config), "seed": config.seed + attempt})
        run_dir = Path(out_dir) / f"run_{attempt}" if out_dir is not None else None
        done = read_run_dir(run_dir) if run_dir is not None else None
        if done is not None:
            logger.info("%s run %d already complete, skipping", config.role, attempt)
            result = done
        else:
            result = run_fn(cfg, manifest, run_dir=run_dir, run_index=attempt)
        result.run_index = attempt
        logger.info("%s run %d: converged=%s best_val_dice=%.4f epochs=%d",
                    config.role, attempt, result.converged, result.best_val_dice, result.epochs)
        results.append(result)
        attempt += 1
    return results, n / len(results)


# ---------------------------------------------------------------- run directories


def write_run_dir(run_dir, result: RunResult, config: TrainConfig) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_dice", "val_dice", "seconds"])
        for r in result.epoch_records:
            w.writerow([r.epoch, f"{r.train_dice:.6f}", f"{r.val_dice:.6f}", f"{r.seconds:.4f}"])
    summary = {
        "role": config.role,
        "run_index": result.run_index,
        "seed": result.seed,
        "converged": str(result.converged).lower(),
        "minutes": f"{result.total_minutes:.4f}",
        "best_val_dice": f"{result.best_val_dice:.6f}",
        "best_epoch": result.best_epoch,
        "epochs": result.epochs,
        "mean_epoch_seconds": f"{result.mean_epoch_seconds:.4f}",
        "stop_reason": result.stop_reason,
        "checkpoint": result.checkpoint or "",
    }
    # written last: its presence marks the run as complete
    tmp = run_dir / "summary.txt.tmp"
    tmp.write_text("".join(f"{k}: {v}\n" for k, v in summary.items()))
    tmp.replace(run_dir / "summary.txt")


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def read_run_dir(run_dir) -> Optional[RunResult]:
    """Reload a finished run, or ``None`` if ``run_dir`` has no summary."""
    run_dir = Path(run_dir)
    if not (run_dir / "summary.txt").is_file():
        return None
    kv = read_kv(run_dir / "summary.txt")
    records = []
    with open(run_dir / "epochs.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(EpochRecord(int(row["epoch"]), float(row["train_dice"]),
                                       float(row["val_dice"]), float(row["seconds"])))
    return RunResult(
        run_index=int(kv["run_index"]),
        seed=int(kv["seed"]),
        epoch_records=records,
        converged=kv["converged"] == "true",
        total_minutes=float(kv["minutes"]),
        best_val_dice=float(kv["best_val_dice"]),
        best_epoch=int(kv["best_epoch"]),
        checkpoint=kv.get("checkpoint") or None,
        stop_reason=kv.get("stop_reason", ""),
    )
