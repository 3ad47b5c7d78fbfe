"""Hybrid CNN encoder / selective-scan bottleneck / CNN decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import functional as F
from .blocks import TriOrientedBlock, VSS3DBlock
from .nn import Conv3d, GroupNorm, LayerNorm, Module, ModuleList
from .tensor import Tensor

BOTTLENECK_KINDS = ("vss3d", "tri_oriented")


@dataclass
class ModelConfig:
    in_channels: int = 1
    channel_schedule: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    bottleneck_channels: Optional[int] = None  # default: 2 x last encoder width
    n_bottleneck_blocks: int = 9
    bottleneck_kind: str = "vss3d"
    state_dim: int = 64
    dt_rank: Optional[int] = None
    n_classes: int = 32
    gn_groups: int = 8
    dropout: float = 0.1
    drop_path: float = 0.3
    mlp_ratio: float = 2.0
    patch_size: int = 96
    pre_bottleneck_kernel: int = 3

    def __post_init__(self):
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if self.bottleneck_channels is None:
            self.bottleneck_channels = 2 * self.channel_schedule[-1]
        self.validate()

    def validate(self) -> None:
        if len(self.channel_schedule) != 4:
            raise ValueError("channel_schedule needs exactly four stage widths")
        for c in self.channel_schedule:
            if c % self.gn_groups:
                raise ValueError(f"stage width {c} not divisible by gn_groups={self.gn_groups}")
        if self.patch_size % 8:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 8")
        if self.bottleneck_kind not in BOTTLENECK_KINDS:
            raise ValueError(f"bottleneck_kind must be one of {BOTTLENECK_KINDS}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_bottleneck_blocks < 1:
            raise ValueError("need at least one bottleneck block")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def desk_scale(cls, **kw) -> "ModelConfig":
        base = dict(channel_schedule=[8, 16, 32, 64], n_bottleneck_blocks=3, patch_size=32, n_classes=6,
                    state_dim=16)
        base.update(kw)
        return cls(**base)


class ResidualBlock(Module):
    """Two conv-GN-ReLU stages plus a shortcut (1x1x1 conv when widths differ)."""

    def __init__(self, c_in: int, c_out: int, gn_groups: int, rng: np.random.Generator):
        self.conv1 = Conv3d(c_in, c_out, 3, rng)
        self.norm1 = GroupNorm(gn_groups, c_out)
        self.conv2 = Conv3d(c_out, c_out, 3, rng)
        self.norm2 = GroupNorm(gn_groups, c_out)
        self.shortcut = Conv3d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = F.relu(self.norm2(self.conv2(h)))
        return h + (self.shortcut(x) if self.shortcut is not None else x)


class UpConv(Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3x3 convolution."""

    def __init__(self, c_in: int, c_out: int, rng):
        self.conv = Conv3d(c_in, c_out, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.upsample_nearest(x, 2))


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.noise = np.random.default_rng(seed + 1)
        w = cfg.channel_schedule
        g = cfg.gn_groups
        widths_in = [cfg.in_channels] + w[:-1]
        self.encoder = ModuleList([ResidualBlock(ci, co, g, rng) for ci, co in zip(widths_in, w)])
        Cb = cfg.bottleneck_channels
        self.pre_bottleneck = Conv3d(w[-1], Cb, cfg.pre_bottleneck_kernel, rng)
        n = cfg.n_bottleneck_blocks
        rates = [cfg.drop_path * i / (n - 1) if n > 1 else 0.0 for i in range(n)]
        blocks = []
        for i in range(n):
            kw = dict(mlp_ratio=cfg.mlp_ratio, drop_path=rates[i], dropout=cfg.dropout,
                      dt_rank=cfg.dt_rank, noise_rng=self.noise)
            if cfg.bottleneck_kind == "vss3d":
                blocks.append(VSS3DBlock(Cb, cfg.state_dim, i % 6, rng, **kw))
            else:
                blocks.append(TriOrientedBlock(Cb, cfg.state_dim, rng, orientation=i % 6, **kw))
        self.bottleneck = ModuleList(blocks)
        self.post_norm = LayerNorm(Cb)
        # decoder level 3 (lowest) fuses bottleneck output with the deepest skip
        self.dec3 = ResidualBlock(Cb + w[3], w[3], g, rng)
        self.up2 = UpConv(w[3], w[2], rng)
        self.dec2 = ResidualBlock(2 * w[2], w[2], g, rng)
        self.up1 = UpConv(w[2], w[1], rng)
        self.dec1 = ResidualBlock(2 * w[1], w[1], g, rng)
        self.up0 = UpConv(w[1], w[0], rng)
        self.dec0 = ResidualBlock(2 * w[0], w[0], g, rng)
        self.head = Conv3d(w[0], cfg.n_classes, 1, rng)

    def reseed_noise(self, seed: int) -> None:
        """Reset the dropout / drop-path stream shared by all bottleneck blocks."""
        self.noise.bit_generator.state = np.random.default_rng(seed).bit_generator.state

    def orientation_indices(self) -> List[int]:
        return [b.orientation for b in self.bottleneck]

    def logits(self, patch: Tensor) -> Tensor:
        s = patch.shape[1:]
        if patch.ndim != 4 or patch.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected patch ({self.cfg.in_channels}, s, s, s), got {patch.shape}")
        if any(d % 8 for d in s):
            raise ValueError(f"patch extents {s} must be divisible by 8")
        skips = []
        h = patch
        for i, stage in enumerate(self.encoder):
            if i:
                h = F.max_pool3d(h, 2, 2)
            h = stage(h)
            skips.append(h)
        h = self.pre_bottleneck(h)
        for block in self.bottleneck:
            h = block(h)
        dims = h.shape[1:]
        h = F.channels_first(self.post_norm(F.channels_last(h)), dims)
        h = self.dec3(F.concat([h, skips[3]], axis=0))
        h = self.dec2(F.concat([self.up2(h), skips[2]], axis=0))
        h = self.dec1(F.concat([self.up1(h), skips[1]], axis=0))
        h = self.dec0(F.concat([self.up0(h), skips[0]], axis=0))
        out = self.head(h)
        if out.shape[1:] != s:
            raise RuntimeError(f"decoder produced {out.shape[1:]} for input {s}")
        return out

    def forward(self, patch: Tensor) -> Tensor:
        """(in_channels, s, s, s) -> per-voxel class probabilities (n_classes, s, s, s)."""
        return F.softmax(self.logits(patch), axis=0)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def forward(model: Model, patch: Tensor, training_mode: bool = False) -> Tensor:
    model.train(training_mode)
    return model(patch)
