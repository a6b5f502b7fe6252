"""Experiment configuration, loaded from a YAML document."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .dataset_io import REFERENCE_SPLIT_COUNTS
from .evaluation_stats import METHODS
from .training import ROLES, TrainConfig

DATA_ROOT_ENV = "LOCSEG_DATA_ROOT"
PRESET_DIR = Path(__file__).parent / "presets"

# networks each evaluation method depends on
METHOD_ROLES = {
    "baseline": ("baseline",),
    "two_stage": ("lowres", "organ"),
    "gt_localised": ("organ",),
}


@dataclass
class ExperimentConfig:
    organ: str
    data_root: Optional[str] = None
    output_root: str = "runs"
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    split_seed: int = 0
    n_runs: int = 10
    max_attempts: int = 50
    margin: int = 15
    split_counts: Optional[List[int]] = None
    case_subset: Optional[List[str]] = None
    channel_policy: str = "first"
    device: str = "cpu"
    desk_scale: bool = False
    save_predictions: bool = True
    workers: int = 1
    synth: Optional[Dict] = None
    train: Dict[str, Dict] = field(default_factory=dict)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.data_root is None:
            self.data_root = os.environ.get(DATA_ROOT_ENV)
        if self.split_counts is None and self.organ in REFERENCE_SPLIT_COUNTS and not self.desk_scale:
            self.split_counts = list(REFERENCE_SPLIT_COUNTS[self.organ])
        for role in ROLES:
            self.train_config(role)  # fail early on bad values or patch divisibility

    @property
    def roles(self) -> List[str]:
        need = {r for m in self.methods for r in METHOD_ROLES[m]}
        return [r for r in ROLES if r in need]

    @property
    def organ_root(self) -> Path:
        return Path(self.output_root) / self.organ

    def train_config(self, role: str) -> TrainConfig:
        kw = dict(self.train.get("common", {}))
        kw.update(self.train.get(role, {}))
        kw.setdefault("seed", self.seed)
        kw["role"] = role
        kw["device"] = self.device
        cfg = TrainConfig(**kw)
        cfg.unet_config().validate()
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no preset named {name!r} in {PRESET_DIR}")
    return path
