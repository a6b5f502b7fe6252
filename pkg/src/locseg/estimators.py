"""scikit-learn style wrappers around the three segmentation strategies.

``X`` is a sequence of volumes (each (D, H, W) or (C, D, H, W), shapes may
differ between cases) and ``y`` a matching sequence of binary masks.
"""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .dataset_io import LOWRES_FACTORS
from .evaluation_stats import dice
from .inference import (
    baseline_segment,
    gt_localised_segment,
    segment_volume,
    two_stage_segment,
)
from .training import TrainConfig, train_model
from .volume_ops import bounding_box, crop_zero_fill, expand_bbox, resize_volume


def check_volumes(X) -> List[np.ndarray]:
    """Validate a sequence of 3D/4D finite volumes and return them as float32 arrays."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) and X.dtype != object:
        raise ValueError("X must be a sequence of volumes; wrap a single volume in a list")
    out = []
    for i, v in enumerate(X):
        v = np.asarray(v, dtype=np.float32)
        if v.ndim not in (3, 4):
            raise ValueError(f"volume {i} has shape {v.shape}, expected 3D or 4D")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"volume {i} contains non-finite values")
        out.append(v)
    if not out:
        raise ValueError("no volumes given")
    return out


def check_masks(y, X: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Validate binary masks aligned with the spatial shape of ``X``."""
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"got {len(y)} masks for {len(X)} volumes")
    out = []
    for i, (m, v) in enumerate(zip(y, X)):
        m = np.asarray(m)
        if m.shape != v.shape[-3:]:
            raise ValueError(f"mask {i} has shape {m.shape}, volume spatial shape is {v.shape[-3:]}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"mask {i} is not binary")
        out.append(m.astype(np.uint8))
    return out


def _holdout(X, y, X_val, y_val, fraction, seed):
    if X_val is not None:
        X_val = check_volumes(X_val)
        return X, y, X_val, check_masks(y_val, X_val)
    n_val = max(1, int(round(fraction * len(X))))
    if len(X) - n_val < 1:
        raise ValueError("too few cases to hold out a validation set")
    order = np.random.default_rng(seed).permutation(len(X))
    val, tr = order[:n_val], order[n_val:]
    return [X[i] for i in tr], [y[i] for i in tr], [X[i] for i in val], [y[i] for i in val]


class UNetSegmenter(BaseEstimator):
    """One 3D U-Net trained under the early-stopping protocol.

    ``role`` picks the validation strategy: ``"baseline"`` validates by
    sliding window over full volumes, ``"lowres"`` and ``"organ"`` on whole
    padded volumes.
    """

    def __init__(self, role="baseline", patch_size=(64, 256, 256), base_channels=32, depth=3,
                 groups_per_norm=8, learning_rate=1e-4, batch_size=2, patience=20, fg_bias=0.8,
                 min_val_dice=0.1, by_epoch=20, max_epochs=1000, samples_per_epoch=None,
                 zscore=True, validation_fraction=0.2, random_state=0, device="cpu"):
        self.role = role
        self.patch_size = patch_size
        self.base_channels = base_channels
        self.depth = depth
        self.groups_per_norm = groups_per_norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.fg_bias = fg_bias
        self.min_val_dice = min_val_dice
        self.by_epoch = by_epoch
        self.max_epochs = max_epochs
        self.samples_per_epoch = samples_per_epoch
        self.zscore = zscore
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.device = device

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            role=self.role, learning_rate=self.learning_rate, batch_size=self.batch_size,
            patch_size=tuple(self.patch_size), patience=self.patience, fg_bias=self.fg_bias,
            min_val_dice=self.min_val_dice, by_epoch=self.by_epoch, max_epochs=self.max_epochs,
            samples_per_epoch=self.samples_per_epoch, seed=int(self.random_state or 0),
            base_channels=self.base_channels, depth=self.depth, groups_per_norm=self.groups_per_norm,
            zscore=self.zscore, device=self.device,
        )

    def fit(self, X, y, X_val=None, y_val=None, run_dir=None):
        cfg = self.train_config()
        X = check_volumes(X)
        y = check_masks(y, X)
        X, y, X_val, y_val = _holdout(X, y, X_val, y_val, self.validation_fraction, cfg.seed)
        self.result_ = train_model(cfg, list(zip(X, y)), list(zip(X_val, y_val)), run_dir=run_dir)
        self.model_ = self.result_.model
        self.converged_ = self.result_.converged
        return self

    def predict(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_volumes(X)
        if self.role == "baseline":
            return [baseline_segment(self.model_, v).mask for v in X]
        return [segment_volume(self.model_, v) for v in X]

    def score(self, X, y) -> float:
        X = check_volumes(X)
        y = check_masks(y, X)
        return float(np.mean([dice(p, t) for p, t in zip(self.predict(X), y)]))


def lowres_data(X, y, factors=LOWRES_FACTORS):
    return ([resize_volume(v, factors, "image") for v in X],
            [resize_volume(m, factors, "label") for m in y])


def cropped_data(X, y, margin=15):
    Xc, yc = [], []
    for v, m in zip(X, y):
        box = expand_bbox(bounding_box(m), margin)
        Xc.append(crop_zero_fill(v, box))
        yc.append(crop_zero_fill(m, box))
    return Xc, yc


def _sub(est, default_role, **fallback):
    est = clone(est) if est is not None else UNetSegmenter(**fallback)
    return est.set_params(role=default_role)


class GTLocalisedSegmenter(BaseEstimator):
    """Organ network applied to crops taken from a reference annotation.

    ``predict`` needs the localising masks alongside the volumes.
    """

    def __init__(self, organ=None, margin=15):
        self.organ = organ
        self.margin = margin

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_volumes(X)
        y = check_masks(y, X)
        Xc, yc = cropped_data(X, y, self.margin)
        if X_val is not None:
            X_val = check_volumes(X_val)
            X_val, y_val = cropped_data(X_val, check_masks(y_val, X_val), self.margin)
        self.organ_ = _sub(self.organ, "organ").fit(Xc, yc, X_val, y_val)
        return self

    def predict(self, X, y_loc) -> List[np.ndarray]:
        return [o.mask for o in self.predict_outputs(X, y_loc)]

    def predict_outputs(self, X, y_loc):
        check_is_fitted(self, "organ_")
        X = check_volumes(X)
        y_loc = check_masks(y_loc, X)
        return [gt_localised_segment(self.organ_.model_, v, m, self.margin) for v, m in zip(X, y_loc)]


class TwoStageSegmenter(BaseEstimator):
    """Low-resolution localiser followed by an organ network on the padded crop."""

    def __init__(self, localiser=None, organ=None, margin=15, factors=LOWRES_FACTORS):
        self.localiser = localiser
        self.organ = organ
        self.margin = margin
        self.factors = factors

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_volumes(X)
        y = check_masks(y, X)
        if X_val is not None:
            X_val = check_volumes(X_val)
            y_val = check_masks(y_val, X_val)
        Xl, yl = lowres_data(X, y, self.factors)
        Xlv, ylv = lowres_data(X_val, y_val, self.factors) if X_val is not None else (None, None)
        self.localiser_ = _sub(self.localiser, "lowres").fit(Xl, yl, Xlv, ylv)

        Xc, yc = cropped_data(X, y, self.margin)
        Xcv, ycv = cropped_data(X_val, y_val, self.margin) if X_val is not None else (None, None)
        self.organ_ = _sub(self.organ, "organ").fit(Xc, yc, Xcv, ycv)
        return self

    @classmethod
    def from_fitted(cls, localiser: UNetSegmenter, organ: UNetSegmenter, margin=15, factors=LOWRES_FACTORS):
        """Assemble a pipeline from separately trained networks (e.g. the i'th of each)."""
        for est in (localiser, organ):
            if not hasattr(est, "model_"):
                raise NotFittedError("both networks must be fitted")
        obj = cls(margin=margin, factors=factors)
        obj.localiser_, obj.organ_ = localiser, organ
        return obj

    def predict(self, X) -> List[np.ndarray]:
        return [o.mask for o in self.predict_outputs(X)]

    def predict_outputs(self, X):
        check_is_fitted(self, ["localiser_", "organ_"])
        X = check_volumes(X)
        return [two_stage_segment(self.localiser_.model_, self.organ_.model_, v, self.margin, self.factors)
                for v in X]
