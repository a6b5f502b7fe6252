"""3D U-Net with group normalisation, shared by all three network roles."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_classes: int = 2
    base_channels: int = 32
    depth: int = 3
    groups_per_norm: int = 8
    patch_size: Tuple[int, int, int] = (64, 256, 256)
    zscore: bool = True  # per-volume input standardisation, applied by callers

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("need in_channels >= 1 and out_classes >= 2")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.base_channels % self.groups_per_norm:
            raise ValueError(
                f"base_channels={self.base_channels} not divisible by groups_per_norm={self.groups_per_norm}")
        m = 2 ** self.depth
        if len(self.patch_size) != 3 or any(p % m for p in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 2**depth={m}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


def _block(cin: int, cout: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    """Encoder-decoder with skip concatenation; output has the input's spatial size."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        g = config.groups_per_norm
        widths = [config.base_channels * 2 ** i for i in range(config.depth + 1)]

        self.down = nn.ModuleList()
        cin = config.in_channels
        for w in widths:
            self.down.append(_block(cin, w, g))
            cin = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_hi, w_lo in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(nn.ConvTranspose3d(w_hi, w_lo, 2, stride=2))
            self.dec.append(_block(2 * w_lo, w_lo, g))
        self.head = nn.Conv3d(widths[0], config.out_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        m = self.config.divisor
        if any(s % m for s in x.shape[2:]):
            raise ValueError(f"input spatial shape {tuple(x.shape[2:])} not divisible by {m}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def _he_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
        # fan_in of a transposed conv is in_channels * kernel volume as well
        fan_in = module.in_channels * int(torch.tensor(module.kernel_size).prod())
        nn.init.normal_(module.weight, 0.0, (2.0 / fan_in) ** 0.5)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.GroupNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def init_params(config: UNetConfig, seed: int, dtype=torch.float32) -> UNet3D:
    """Build a network with He-initialised kernels, deterministic in ``seed``."""
    config.validate()
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = UNet3D(config)
        net.apply(_he_init)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.to(dtype)


def forward(params: UNet3D, batch) -> torch.Tensor:
    """Logits of shape (batch, out_classes, *spatial) for a (batch, channels, *spatial) input."""
    batch = torch.as_tensor(batch)
    p = next(params.parameters())
    return params(batch.to(dtype=p.dtype, device=p.device))


def save_checkpoint(path, params: UNet3D, epoch: int, best_val_dice: float, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "state_dict": params.state_dict(),
        "epoch": int(epoch),
        "best_val_dice": float(best_val_dice),
        **extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, device="cpu"):
    """Return (network, checkpoint dict)."""
    state = torch.load(path, map_location=device, weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    net = UNet3D(UNetConfig(**state["config"]))
    net.load_state_dict(state["state_dict"])
    net.to(next(iter(state["state_dict"].values())).dtype)
    return net, state
