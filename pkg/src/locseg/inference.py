"""Full-resolution segmentation pipelines.

* baseline: sliding-window segmentation of the whole volume
* two-stage: a low-resolution localisation network finds the organ, then an
  organ network segments the crop around it
* ground-truth localised: the organ network segments a crop taken from the
  reference annotation
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset_io import LOWRES_FACTORS
from .unet3d import UNet3D, UNetConfig
from .volume_ops import (
    BBox3,
    EmptyMaskError,
    bounding_box,
    crop_zero_fill,
    expand_bbox,
    largest_component,
    pad_to_multiple,
    paste,
    resize_volume,
    scale_bbox,
)

logger = logging.getLogger(__name__)


@dataclass
class PipelineOutput:
    mask: np.ndarray
    used_fallback: bool = False
    crop_bbox: Optional[BBox3] = None


def zscore(vol: np.ndarray) -> np.ndarray:
    vol = np.asarray(vol, dtype=np.float32)
    sd = float(vol.std())
    return (vol - float(vol.mean())) / (sd if sd > 0 else 1.0)


def prepare_input(vol: np.ndarray, config: UNetConfig) -> np.ndarray:
    """Standardise each channel if configured; always returns (channels, D, H, W)."""
    vol = np.asarray(vol, dtype=np.float32)
    if vol.ndim == 3:
        vol = vol[None]
    if config.zscore:
        vol = np.stack([zscore(c) for c in vol])
    return vol


def _predict(params: UNet3D, x: np.ndarray) -> np.ndarray:
    """Argmax labels for one prepared (channels, D, H, W) array."""
    p = next(params.parameters())
    with torch.no_grad():
        logits = params(torch.from_numpy(np.ascontiguousarray(x[None])).to(dtype=p.dtype, device=p.device))
    return logits[0].argmax(0).cpu().numpy().astype(np.uint8)


def _tile_starts(size: int, patch: int) -> List[int]:
    starts = list(range(0, size - patch + 1, patch))
    if starts[-1] + patch < size:
        starts.append(size - patch)  # edge tile shifted inward
    return starts


def sliding_window_segment(params: UNet3D, volume: np.ndarray, patch_size: Sequence[int],
                           prepared: bool = False) -> np.ndarray:
    """Segment ``volume`` tile by tile with stride equal to ``patch_size``.

    Edge tiles are shifted inward and only fill voxels no earlier tile has
    written, so every voxel is predicted exactly once. Axes shorter than the
    patch are zero padded.
    """
    params.eval()
    x = volume if prepared else prepare_input(volume, params.config)
    spatial = x.shape[-3:]
    patch = tuple(int(p) for p in patch_size)
    x, _ = pad_to_multiple(x, 1, min_shape=patch)
    padded = x.shape[-3:]

    out = np.zeros(padded, dtype=np.uint8)
    starts = [_tile_starts(s, p) for s, p in zip(padded, patch)]
    for corner in itertools.product(*starts):
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
        pred = _predict(params, x[(Ellipsis,) + sl])
        # region of this tile not yet covered by the previous tile on each axis
        write = []
        for axis, c in enumerate(corner):
            idx = starts[axis].index(c)
            prev_end = starts[axis][idx - 1] + patch[axis] if idx else c
            write.append(max(c, prev_end) - c)
        wsl = tuple(slice(c + w, c + p) for c, w, p in zip(corner, write, patch))
        out[wsl] = pred[tuple(slice(w, None) for w in write)]
    return out[tuple(slice(0, s) for s in spatial)]


def segment_whole(params: UNet3D, volume: np.ndarray, prepared: bool = False) -> np.ndarray:
    """Segment a whole volume in one pass after padding it to a valid shape."""
    params.eval()
    x = volume if prepared else prepare_input(volume, params.config)
    spatial = x.shape[-3:]
    x, _ = pad_to_multiple(x, params.config.divisor)
    return _predict(params, x)[tuple(slice(0, s) for s in spatial)]


def segment_volume(params: UNet3D, volume: np.ndarray, patch_size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Whole-volume pass when it fits in one patch, sliding window otherwise."""
    patch = tuple(patch_size or params.config.patch_size)
    shape = np.asarray(volume).shape[-3:]
    if all(s <= p for s, p in zip(shape, patch)):
        return segment_whole(params, volume)
    return sliding_window_segment(params, volume, patch)


def _segment_crop(organ_params: UNet3D, volume: np.ndarray, box: BBox3) -> np.ndarray:
    crop = crop_zero_fill(np.asarray(volume), box)
    sub = segment_volume(organ_params, crop)
    return paste(np.asarray(volume).shape[-3:], sub, box)


def localise(loc_params: UNet3D, volume: np.ndarray, factors=LOWRES_FACTORS) -> Optional[BBox3]:
    """Full-resolution box of the largest organ region found at low resolution, or None."""
    volume = np.asarray(volume)
    small = resize_volume(volume, factors, "image")
    low_mask = segment_volume(loc_params, small)
    try:
        region = largest_component(low_mask)
    except EmptyMaskError:
        return None
    return scale_bbox(bounding_box(region), region.shape, volume.shape[-3:])


def two_stage_segment(loc_params: UNet3D, organ_params: UNet3D, volume: np.ndarray,
                      margin: int = 15, factors=LOWRES_FACTORS) -> PipelineOutput:
    """Localise at low resolution, then segment the padded crop at full resolution.

    If the localisation network finds nothing, the organ network segments the
    whole volume and ``used_fallback`` is set.
    """
    volume = np.asarray(volume)
    box = localise(loc_params, volume, factors)
    if box is None:
        logger.warning("empty localisation, falling back to whole-volume organ segmentation")
        mask = segment_volume(organ_params, volume)
        return PipelineOutput(mask=mask, used_fallback=True, crop_bbox=None)
    box = expand_bbox(box, margin)
    return PipelineOutput(mask=_segment_crop(organ_params, volume, box), crop_bbox=box)


def gt_localised_segment(organ_params: UNet3D, volume: np.ndarray, gt_label: np.ndarray,
                         margin: int = 15) -> PipelineOutput:
    """Segment the crop given by the reference annotation's box plus ``margin``."""
    box = expand_bbox(bounding_box(gt_label), margin)
    return PipelineOutput(mask=_segment_crop(organ_params, np.asarray(volume), box), crop_bbox=box)


def baseline_segment(params: UNet3D, volume: np.ndarray) -> PipelineOutput:
    return PipelineOutput(mask=sliding_window_segment(params, volume, params.config.patch_size))


def pair_runs(loc_results: Sequence, organ_results: Sequence) -> List[Tuple]:
    """Couple the i'th localisation run with the i'th organ run."""
    if len(loc_results) != len(organ_results):
        raise ValueError(f"cannot pair {len(loc_results)} localisation runs "
                         f"with {len(organ_results)} organ runs")
    return list(zip(loc_results, organ_results))
