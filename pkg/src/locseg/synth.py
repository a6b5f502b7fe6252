"""Synthetic organ-segmentation tasks for desk-scale experiments.

Each case is an ellipsoidal "organ" of a chosen foreground percentage placed
in a smooth noisy background, with a few dimmer, smaller distractor blobs.
Tasks are written in the Medical Segmentation Decathlon layout.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset_io import write_nifti


def _ellipsoid(shape, centre, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii))
    return r2 <= 1.0


def make_case(shape: Sequence[int] = (32, 64, 64), fg_percent: float = 0.3,
              rng: np.random.Generator | None = None, n_distractors: int = 3,
              contrast: float = 1.0, noise: float = 0.35, smooth: float = 0.3,
              aspect: Tuple[float, float, float] = (0.8, 1.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(image float32, label uint8)`` for one synthetic case."""
    rng = rng if rng is not None else np.random.default_rng()
    shape = tuple(int(s) for s in shape)
    n_fg = fg_percent / 100.0 * np.prod(shape)
    # ellipsoid volume 4/3 pi abc with radii proportional to aspect
    scale = (n_fg / (4 / 3 * math.pi * np.prod(aspect))) ** (1 / 3)
    jitter = rng.uniform(0.85, 1.15, size=3)
    radii = np.maximum(np.array(aspect) * scale * jitter, 1.0)

    lo = np.ceil(radii).astype(int) + 1
    hi = np.array(shape) - lo
    centre = [rng.uniform(l, max(h, l + 1)) for l, h in zip(lo, hi)]
    organ = _ellipsoid(shape, centre, radii)
    if not organ.any():
        organ[tuple(int(c) for c in centre)] = True

    background = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=6.0)
    background *= smooth / (background.std() + 1e-12)
    image = background + rng.normal(0.0, noise, size=shape)
    image[organ] += contrast

    for _ in range(n_distractors):
        r = radii * rng.uniform(0.35, 0.6)
        c = [rng.uniform(0, s) for s in shape]
        blob = _ellipsoid(shape, c, r) & ~ndimage.binary_dilation(organ, iterations=2)
        image[blob] += contrast * rng.uniform(0.4, 0.7)

    return image.astype(np.float32), organ.astype(np.uint8)


def make_task(n_cases: int, shape=(32, 64, 64), fg_percent: float = 0.3, seed: int = 0, **kw):
    """Generate ``n_cases`` in memory as a list of ``(case_id, image, label)``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        img, lab = make_case(shape, fg_percent, rng, **kw)
        out.append((f"synth_{i:03d}", img, lab))
    return out


def write_task(out_root, n_cases: int, shape=(32, 64, 64), fg_percent: float = 0.3,
               seed: int = 0, name: str = "synthetic", **kw) -> Path:
    """Write a synthetic task as ``imagesTr/``, ``labelsTr/`` and ``dataset.json``."""
    root = Path(out_root)
    training = []
    for case_id, img, lab in make_task(n_cases, shape, fg_percent, seed, **kw):
        write_nifti(root / "imagesTr" / f"{case_id}.nii.gz", img)
        write_nifti(root / "labelsTr" / f"{case_id}.nii.gz", lab)
        training.append({"image": f"./imagesTr/{case_id}.nii.gz", "label": f"./labelsTr/{case_id}.nii.gz"})
    meta = {
        "name": name,
        "description": f"synthetic ellipsoid organ, {fg_percent}% foreground",
        "modality": {"0": "synthetic"},
        "labels": {"0": "background", "1": "organ"},
        "numTraining": n_cases,
        "training": training,
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    return root
