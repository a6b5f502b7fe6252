"""Geometric and combinatorial helpers for 3D volumes.

Volumes are numpy arrays indexed (depth, height, width), optionally with a
leading channel axis. Boxes are half-open per-axis index intervals.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.transform import resize

Interval = Tuple[int, int]


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one foreground voxel."""


class BBox3(NamedTuple):
    """Half-open box ``[lo, hi)`` on each of the depth, height, width axes."""

    z: Interval
    y: Interval
    x: Interval

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[int]]) -> "BBox3":
        if len(pairs) != 3:
            raise ValueError(f"expected 3 (lo, hi) pairs, got {len(pairs)}")
        box = cls(*((int(lo), int(hi)) for lo, hi in pairs))
        for lo, hi in box:
            if hi <= lo:
                raise ValueError(f"invalid interval [{lo}, {hi}) in {box}")
        return box

    @property
    def lo(self) -> Tuple[int, int, int]:
        return tuple(p[0] for p in self)

    @property
    def hi(self) -> Tuple[int, int, int]:
        return tuple(p[1] for p in self)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(hi - lo for lo, hi in self)

    def to_list(self):
        return [list(p) for p in self]


def output_shape(shape: Sequence[int], factors: Sequence[float]) -> Tuple[int, ...]:
    """Resized shape, ``max(1, round(size * factor))`` with halves rounded up."""
    return tuple(max(1, int(math.floor(s * f + 0.5))) for s, f in zip(shape, factors))


def resize_volume(vol: np.ndarray, factors: Sequence[float], mode: str = "image") -> np.ndarray:
    """Resize the last three axes of ``vol`` by per-axis ``factors``.

    ``mode="image"`` uses trilinear interpolation with anti-aliasing when
    shrinking. ``mode="label"`` interpolates the binary mask trilinearly and
    thresholds at 0.5, returning uint8 values in {0, 1}.
    """
    factors = tuple(float(f) for f in factors)
    if len(factors) != 3:
        raise ValueError("factors must have one entry per spatial axis")
    if any(not f > 0 for f in factors):
        raise ValueError(f"resize factors must be positive, got {factors}")
    if mode not in ("image", "label"):
        raise ValueError(f"unknown resize mode {mode!r}")

    vol = np.asarray(vol)
    spatial = vol.shape[-3:]
    new_spatial = output_shape(spatial, factors)

    if mode == "label":
        out = resize(
            (vol > 0).astype(np.float64),
            vol.shape[:-3] + new_spatial,
            order=1,
            mode="edge",
            anti_aliasing=False,
            preserve_range=True,
        )
        return (out >= 0.5).astype(np.uint8)

    return resize(
        vol.astype(np.float64),
        vol.shape[:-3] + new_spatial,
        order=1,
        mode="edge",
        anti_aliasing=any(n < s for n, s in zip(new_spatial, spatial)),
        preserve_range=True,
    ).astype(np.float32)


def bounding_box(mask: np.ndarray) -> BBox3:
    """Tightest half-open box around all foreground voxels."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    pairs = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(np.any(mask, axis=other))
        if hits.size == 0:
            raise EmptyMaskError("mask has no foreground voxels")
        pairs.append((int(hits[0]), int(hits[-1]) + 1))
    return BBox3(*pairs)


def expand_bbox(bbox: BBox3, margin: int) -> BBox3:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return BBox3(*((lo - margin, hi + margin) for lo, hi in bbox))


def _overlap(bbox: BBox3, shape: Sequence[int]):
    """Slices into the volume and into the box-shaped array for their overlap."""
    vol_sl, box_sl = [], []
    for (lo, hi), size in zip(bbox, shape):
        a, b = max(lo, 0), min(hi, size)
        if b <= a:
            return None
        vol_sl.append(slice(a, b))
        box_sl.append(slice(a - lo, b - lo))
    return tuple(vol_sl), tuple(box_sl)


def crop_zero_fill(vol: np.ndarray, bbox: BBox3) -> np.ndarray:
    """Crop the last three axes to ``bbox``; voxels outside ``vol`` are zero."""
    vol = np.asarray(vol)
    lead = vol.shape[:-3]
    out = np.zeros(lead + tuple(bbox.shape), dtype=vol.dtype)
    ov = _overlap(bbox, vol.shape[-3:])
    if ov is not None:
        vol_sl, box_sl = ov
        out[(Ellipsis,) + box_sl] = vol[(Ellipsis,) + vol_sl]
    return out


def paste(canvas_shape: Sequence[int], sub: np.ndarray, bbox: BBox3) -> np.ndarray:
    """Write ``sub`` at ``bbox`` into a zero canvas, discarding out-of-bounds parts."""
    sub = np.asarray(sub)
    if tuple(sub.shape[-3:]) != tuple(bbox.shape):
        raise ValueError(f"sub shape {sub.shape} does not match bbox extents {bbox.shape}")
    canvas = np.zeros(tuple(canvas_shape), dtype=sub.dtype)
    ov = _overlap(bbox, canvas.shape[-3:])
    if ov is not None:
        vol_sl, box_sl = ov
        canvas[(Ellipsis,) + vol_sl] = sub[(Ellipsis,) + box_sl]
    return canvas


def label_components(mask: np.ndarray, connectivity: int = 26):
    """Label connected components; labels follow raster order of each component's first voxel."""
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ValueError("connectivity must be 6, 18 or 26")
    structure = ndimage.generate_binary_structure(3, rank)
    return ndimage.label(np.asarray(mask) > 0, structure=structure)


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component of ``mask``.

    Ties go to the component whose first voxel comes first in raster
    (lexicographic) order. Raises :class:`EmptyMaskError` on an empty mask.
    """
    labels, n = label_components(mask, connectivity)
    if n == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    # argmax returns the first maximum, i.e. the lowest label
    keep = int(np.argmax(sizes))
    return (labels == keep).astype(np.uint8)


def scale_bbox(bbox: BBox3, from_shape: Sequence[int], to_shape: Sequence[int]) -> BBox3:
    """Map a box between grids, rounding outward so nothing is clipped."""
    pairs = []
    for (lo, hi), f, t in zip(bbox, from_shape, to_shape):
        if f <= 0 or t <= 0:
            raise ValueError("shapes must be positive")
        # integer arithmetic keeps floor/ceil exact
        pairs.append(((lo * t) // f, -((-hi * t) // f)))
    return BBox3(*pairs)


def foreground_percent(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(mask)) / mask.size


def pad_to_multiple(vol: np.ndarray, multiple: int, min_shape: Sequence[int] | None = None):
    """Zero-pad the last three axes at the far end up to a multiple of ``multiple``.

    Returns the padded array and the original spatial shape.
    """
    vol = np.asarray(vol)
    spatial = vol.shape[-3:]
    target = []
    for i, s in enumerate(spatial):
        s2 = max(s, min_shape[i]) if min_shape is not None else s
        target.append(-(-s2 // multiple) * multiple)
    pad = [(0, 0)] * (vol.ndim - 3) + [(0, t - s) for t, s in zip(target, spatial)]
    return np.pad(vol, pad), tuple(spatial)
