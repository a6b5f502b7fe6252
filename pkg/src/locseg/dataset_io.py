"""Reading MSD-style tasks, splitting them, and building derived datasets.

On disk, NIfTI arrays are stored (x, y, z[, channel]); in memory every
volume is (depth, height, width) with an optional leading channel axis.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np

from .volume_ops import (
    BBox3,
    EmptyMaskError,
    bounding_box,
    crop_zero_fill,
    expand_bbox,
    resize_volume,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
LOWRES_FACTORS = (1 / 3, 1 / 2, 1 / 2)

# reference (train, val, test) case counts per MSD organ
REFERENCE_SPLIT_COUNTS: Dict[str, Tuple[int, int, int]] = {
    "spleen": (25, 8, 8),
    "pancreas": (169, 56, 56),
    "prostate": (19, 7, 6),
    "liver": (41, 14, 14),
    "heart": (12, 4, 4),
}


class DatasetError(RuntimeError):
    """Raised for unreadable or inconsistent dataset content."""


@dataclass
class VolumeImage:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim not in (3, 4):
            raise ValueError(f"{self.case_id}: image must be 3D or 4D, got {self.voxels.shape}")
        if min(self.voxels.shape) < 1:
            raise ValueError(f"{self.case_id}: empty axis in image shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError(f"{self.case_id}: image has non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"{self.case_id}: spacing must be 3 positive values, got {self.spacing}")

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape[-3:])


@dataclass
class LabelMask:
    voxels: np.ndarray
    case_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"{self.case_id}: label must be 3D, got {self.voxels.shape}")
        if not np.isin(self.voxels, (0, 1)).all():
            raise ValueError(f"{self.case_id}: label values must be in {{0, 1}}")
        self.voxels = self.voxels.astype(np.uint8)


@dataclass
class CaseRecord:
    case_id: str
    image: str
    label: str
    bbox: Optional[list] = None  # crop box in source coordinates, cropped datasets only
    source_shape: Optional[list] = None


@dataclass
class SplitManifest:
    organ: str
    seed: int
    train: List[CaseRecord]
    val: List[CaseRecord]
    test: List[CaseRecord]
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    kind: str = "full"  # full | lowres | cropped
    margin: Optional[int] = None

    def split(self, name: str) -> List[CaseRecord]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["counts"] = dict(zip(SPLITS, self.counts))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        kw = {k: d[k] for k in ("organ", "seed", "kind") if k in d}
        kw["margin"] = d.get("margin")
        kw["ratios"] = tuple(d.get("ratios", DEFAULT_RATIOS))
        for s in SPLITS:
            kw[s] = [CaseRecord(**r) for r in d[s]]
        return cls(**kw)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- NIfTI I/O


def read_nifti(path) -> Tuple[np.ndarray, np.ndarray, Tuple[float, ...]]:
    """Return (array in depth-first order, affine, spacing in the same order)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    if data.ndim == 3:
        arr = data.transpose(2, 1, 0)
    elif data.ndim == 4:
        arr = data.transpose(3, 2, 1, 0)
    else:
        raise DatasetError(f"{path}: unsupported NIfTI rank {data.ndim}")
    return np.ascontiguousarray(arr), img.affine, zooms[::-1]


def write_nifti(path, arr: np.ndarray, affine: Optional[np.ndarray] = None,
                spacing: Optional[Sequence[float]] = None) -> None:
    """Write a depth-first array, transposing back to NIfTI (x, y, z) order."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        data = arr.transpose(2, 1, 0)
    elif arr.ndim == 4:
        data = arr.transpose(3, 2, 1, 0)
    else:
        raise ValueError(f"cannot write array of shape {arr.shape}")
    if affine is None:
        sp = spacing[::-1] if spacing is not None else (1.0, 1.0, 1.0)
        affine = np.diag(list(sp) + [1.0])
    if data.dtype == np.float64:
        data = data.astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(nib.Nifti1Image(np.ascontiguousarray(data), affine), str(path))


def load_msd_case(image_path, label_path, channel_policy: str = "first") -> Tuple[VolumeImage, LabelMask]:
    """Load one image/label pair, binarising the label (any class > 0 is organ).

    ``channel_policy`` is ``"first"`` (keep channel 0 of multi-modal images) or
    ``"all"`` (keep every channel on a leading axis).
    """
    if channel_policy not in ("first", "all"):
        raise ValueError(f"unknown channel_policy {channel_policy!r}")
    case_id = case_id_from_path(image_path)
    img, affine, spacing = read_nifti(image_path)
    lab, _, _ = read_nifti(label_path)

    if lab.ndim != 3:
        raise DatasetError(f"{case_id}: label must be 3D, got shape {lab.shape}")
    if img.shape[-3:] != lab.shape:
        raise DatasetError(f"{case_id}: image shape {img.shape} does not match label shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(np.isfinite(lab)) or not np.all(lab == np.round(lab)):
            raise DatasetError(f"{case_id}: label contains non-integer values")
    if img.ndim == 4 and channel_policy == "first":
        img = img[0]

    image = VolumeImage(img.astype(np.float32), spacing=spacing, case_id=case_id, affine=affine)
    label = LabelMask((lab > 0).astype(np.uint8), case_id=case_id)
    return image, label


def case_id_from_path(path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def list_msd_cases(data_root, subset: Optional[Sequence[str]] = None) -> List[CaseRecord]:
    """Enumerate labelled training cases of an MSD task directory.

    Uses ``dataset.json`` when present, else pairs ``imagesTr``/``labelsTr`` by
    file name. ``subset`` restricts to the given case ids.
    """
    root = Path(data_root)
    labels_dir = root / "labelsTr"
    if not labels_dir.is_dir():
        raise DatasetError(f"missing labelsTr/ under {root}")
    if not (root / "imagesTr").is_dir():
        raise DatasetError(f"missing imagesTr/ under {root}")

    meta = root / "dataset.json"
    pairs = []
    if meta.is_file():
        for entry in json.loads(meta.read_text()).get("training", []):
            pairs.append(((root / entry["image"]).resolve(), (root / entry["label"]).resolve()))
    else:
        for lab in sorted(labels_dir.glob("*.nii*")):
            if lab.name.startswith("."):
                continue
            pairs.append(((root / "imagesTr" / lab.name).resolve(), lab.resolve()))

    records = [CaseRecord(case_id_from_path(i), str(i), str(l)) for i, l in pairs]
    records.sort(key=lambda r: r.case_id)
    if subset is not None:
        wanted = set(subset)
        records = [r for r in records if r.case_id in wanted]
        missing = wanted - {r.case_id for r in records}
        if missing:
            raise DatasetError(f"requested cases not found: {sorted(missing)}")
    for r in records:
        for p in (r.image, r.label):
            if not Path(p).is_file():
                raise DatasetError(f"{r.case_id}: missing file {p}")
    return records


def split_counts(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> Tuple[int, int, int]:
    n_train = int(math.floor(ratios[0] * n + 0.5))
    n_test = int(math.floor(ratios[2] * n + 0.5))
    return n_train, n - n_train - n_test, n_test


def split_dataset(cases: Sequence[CaseRecord], ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0, override_counts: Optional[Sequence[int]] = None,
                  organ: str = "") -> SplitManifest:
    """Shuffle ``cases`` with ``seed`` and partition into train/val/test."""
    n = len(cases)
    if n < 3:
        raise ValueError(f"need at least 3 cases to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    if override_counts is not None:
        counts = tuple(int(c) for c in override_counts)
        if len(counts) != 3 or sum(counts) != n or min(counts) < 0:
            raise ValueError(f"override counts {counts} do not sum to {n} cases")
    else:
        counts = split_counts(n, ratios)

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [cases[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return SplitManifest(organ=organ, seed=seed, ratios=tuple(ratios),
                         train=shuffled[:a], val=shuffled[a:b], test=shuffled[b:])


def _derived_paths(out_root: Path, split: str, case_id: str) -> Tuple[Path, Path]:
    return (out_root / split / "images" / f"{case_id}.nii.gz",
            out_root / split / "labels" / f"{case_id}.nii.gz")


def _run_per_case(fn, manifest: SplitManifest, workers: int):
    jobs = [(s, r) for s in SPLITS for r in manifest.split(s)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda job: fn(*job), jobs))
    else:
        results = [fn(*job) for job in jobs]
    out = {s: [] for s in SPLITS}
    for (s, _), rec in zip(jobs, results):
        out[s].append(rec)
    return out


def build_lowres_dataset(manifest: SplitManifest, out_root, factors=LOWRES_FACTORS,
                         channel_policy: str = "first", workers: int = 1) -> SplitManifest:
    """Write a copy of every case resized to a third of its depth and half its height/width."""
    out_root = Path(out_root)

    def one(split, rec):
        image, label = load_msd_case(rec.image, rec.label, channel_policy)
        small_img = resize_volume(image.voxels, factors, "image")
        small_lab = resize_volume(label.voxels, factors, "label")
        spacing = tuple(sp * s / n for sp, s, n in zip(image.spacing, image.spatial_shape, small_lab.shape))
        ip, lp = _derived_paths(out_root, split, rec.case_id)
        write_nifti(ip, small_img, spacing=spacing)
        write_nifti(lp, small_lab, spacing=spacing)
        return CaseRecord(rec.case_id, str(ip.resolve()), str(lp.resolve()),
                          source_shape=list(image.spatial_shape))

    recs = _run_per_case(one, manifest, workers)
    out = SplitManifest(organ=manifest.organ, seed=manifest.seed, ratios=manifest.ratios,
                        kind="lowres", **recs)
    out.save(out_root / "manifest.json")
    return out


def build_cropped_dataset(manifest: SplitManifest, out_root, margin: int = 15,
                          channel_policy: str = "first", workers: int = 1) -> SplitManifest:
    """Write every case cropped to its organ bounding box plus ``margin`` voxels.

    Regions beyond the image bounds are zero filled, which is the same as
    zero-padding the image by ``margin`` first and then cropping.
    """
    out_root = Path(out_root)

    def one(split, rec):
        image, label = load_msd_case(rec.image, rec.label, channel_policy)
        try:
            box = expand_bbox(bounding_box(label.voxels), margin)
        except EmptyMaskError:
            raise DatasetError(f"{rec.case_id}: empty label, cannot crop to organ") from None
        ip, lp = _derived_paths(out_root, split, rec.case_id)
        write_nifti(ip, crop_zero_fill(image.voxels, box), spacing=image.spacing)
        write_nifti(lp, crop_zero_fill(label.voxels, box), spacing=image.spacing)
        return CaseRecord(rec.case_id, str(ip.resolve()), str(lp.resolve()),
                          bbox=box.to_list(), source_shape=list(image.spatial_shape))

    recs = _run_per_case(one, manifest, workers)
    out = SplitManifest(organ=manifest.organ, seed=manifest.seed, ratios=manifest.ratios,
                        kind="cropped", margin=margin, **recs)
    out.save(out_root / "manifest.json")
    return out


def load_split_arrays(records: Sequence[CaseRecord], channel_policy: str = "first"):
    """Load (image, label) arrays for a list of case records."""
    out = []
    for rec in records:
        image, label = load_msd_case(rec.image, rec.label, channel_policy)
        out.append((rec.case_id, image.voxels, label.voxels))
    return out
