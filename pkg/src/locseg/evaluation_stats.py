"""Dice scoring, significance tests and table aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import stats

METHODS = ("baseline", "two_stage", "gt_localised")
EVAL_SPLITS = ("validation", "test")


def dice(pred, gt) -> float:
    """2|A∩B| / (|A| + |B|), defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred > 0
    b = gt > 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def two_sided_t_test(a, b, equal_var: bool = True) -> Tuple[float, float]:
    """Independent two-sample t-test, pooled variance by default.

    Returns ``(t, p)``. Samples with zero spread and equal means give
    ``(0.0, 1.0)``; zero spread with different means gives ``(±inf, 0.0)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    if np.var(a) == 0 and np.var(b) == 0:
        diff = a.mean() - b.mean()
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    res = stats.ttest_ind(a, b, equal_var=equal_var)
    return float(res.statistic), float(res.pvalue)


@dataclass
class MethodScores:
    """Per-run mean dice for one (organ, method, split) cell."""

    organ: str
    method: str
    split: str
    run_dice: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.split not in EVAL_SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.run_dice = [float(v) for v in self.run_dice]
        if any(not 0.0 <= v <= 1.0 for v in self.run_dice):
            raise ValueError("dice values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.run_dice))

    @property
    def std(self) -> float:
        if len(self.run_dice) < 2:
            return 0.0
        return float(np.std(self.run_dice, ddof=1))


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def _index(scores: Iterable[MethodScores]) -> Dict[Tuple[str, str, str], MethodScores]:
    return {(s.organ, s.method, s.split): s for s in scores}


def _p(a: MethodScores, b: MethodScores, equal_var: bool) -> float:
    if len(a.run_dice) < 2 or len(b.run_dice) < 2:
        return math.nan
    return two_sided_t_test(a.run_dice, b.run_dice, equal_var)[1]


def aggregate(scores: Iterable[MethodScores], methods: Sequence[str] = METHODS,
              equal_var: bool = True) -> List[dict]:
    """One row per (organ, method, split) with mean, sample std and p-values.

    ``p_vs_baseline`` and ``p_vs_two_stage`` are two-sided; the ``sig_*``
    flags mark cells whose mean is above the baseline at 0.05 / 0.001.
    """
    idx = _index(scores)
    organs = sorted({k[0] for k in idx})
    splits = [s for s in EVAL_SPLITS if any(k[2] == s for k in idx)]
    rows = []
    for organ in organs:
        for split in splits:
            for method in methods:
                cell = idx.get((organ, method, split))
                if cell is None:
                    raise KeyError(f"missing scores for {organ}/{method}/{split}")
                if not cell.run_dice:
                    raise KeyError(f"no runs recorded for {organ}/{method}/{split}")
                row = {
                    "organ": organ,
                    "split": split,
                    "method": method,
                    "n_runs": len(cell.run_dice),
                    "mean": cell.mean,
                    "std": cell.std,
                    "cell": format_cell(cell.mean, cell.std),
                    "p_vs_baseline": math.nan,
                    "p_vs_two_stage": math.nan,
                }
                base = idx.get((organ, "baseline", split))
                two = idx.get((organ, "two_stage", split))
                if method != "baseline" and base is not None:
                    row["p_vs_baseline"] = _p(cell, base, equal_var)
                if method != "two_stage" and two is not None:
                    row["p_vs_two_stage"] = _p(cell, two, equal_var)
                p = row["p_vs_baseline"]
                above = base is not None and cell.mean > base.mean
                row["sig_0.05"] = bool(above and p < 0.05)
                row["sig_0.001"] = bool(above and p < 0.001)
                row["bold"] = row["sig_0.05"]
                rows.append(row)
    return rows


def benefit_vs_foreground(scores: Iterable[MethodScores], fg_percents: Mapping[str, float],
                          split: str = "test") -> List[dict]:
    """Mean localised dice minus mean baseline dice, per organ, against foreground %."""
    idx = _index(scores)
    rows = []
    for organ in sorted(fg_percents):
        cells = {}
        for m in METHODS:
            c = idx.get((organ, m, split))
            if c is None:
                raise KeyError(f"missing scores for {organ}/{m}/{split}")
            cells[m] = c.mean
        rows.append({
            "organ": organ,
            "split": split,
            "foreground_percent": float(fg_percents[organ]),
            "two_stage_benefit": cells["two_stage"] - cells["baseline"],
            "gt_localised_benefit": cells["gt_localised"] - cells["baseline"],
        })
    return rows
