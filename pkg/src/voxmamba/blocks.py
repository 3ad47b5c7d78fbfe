"""Bottleneck blocks: SS3D, VSS3D and the tri-oriented comparator."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .nn import Conv3d, LayerNorm, Linear, Module, ModuleList, uniform
from .paths import N_VARIANTS, group_paths
from .selective_scan import S6
from .tensor import Tensor, stack_sum, take_rows


class SS3D(Module):
    """Eight S6 branches, one per path of a single orientation group.

    Each branch gathers the volume along its path, scans it and scatters the
    result back; the eight volumes are summed in variant order 0..7.
    """

    def __init__(self, channels: int, state_dim: int, orientation: int, rng: np.random.Generator,
                 dt_rank: Optional[int] = None):
        if not 0 <= orientation < 6:
            raise ValueError(f"orientation index must be in 0..5, got {orientation}")
        self.orientation = orientation
        self.channels = channels
        self.branches = ModuleList([S6(channels, state_dim, rng, dt_rank) for _ in range(N_VARIANTS)])
        self.scan_mode = "scan"

    def branch_outputs(self, seq: Tensor, dims: Tuple[int, int, int], schedule: Optional[Sequence[int]] = None):
        """Per-variant scattered outputs (L, C); ``schedule`` only changes execution order."""
        paths = group_paths(dims, self.orientation)
        results = [None] * N_VARIANTS
        for v in (schedule if schedule is not None else range(N_VARIANTS)):
            p = paths[v]
            y = self.branches[v](take_rows(seq, p.order, p.inverse), self.scan_mode)
            results[v] = take_rows(y, p.inverse, p.order)
        return results

    def forward_seq(self, seq: Tensor, dims, schedule=None) -> Tensor:
        if seq.shape[1] != self.channels:
            raise ValueError(f"SS3D expects {self.channels} channels, got {seq.shape[1]}")
        return stack_sum(self.branch_outputs(seq, tuple(dims), schedule))

    def forward(self, x: Tensor, schedule=None) -> Tensor:
        """(C, D, H, W) -> (C, D, H, W)."""
        dims = x.shape[1:]
        return F.channels_first(self.forward_seq(F.channels_last(x), dims, schedule), dims)


class MLP(Module):
    def __init__(self, channels: int, ratio: float, rng, dropout: float = 0.0, noise_rng=None):
        hidden = int(round(channels * ratio))
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng, zero_init=True)
        self.dropout = dropout
        self.noise = noise_rng if noise_rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        h = F.dropout(F.silu(self.fc1(x)), self.dropout, self.training, self.noise)
        return F.dropout(self.fc2(h), self.dropout, self.training, self.noise)


class VSS3DBlock(Module):
    """Two residual modules: LN-proj-dwconv-SiLU-SS3D-LN-proj, then LN-MLP."""

    def __init__(self, channels: int, state_dim: int, orientation: int, rng: np.random.Generator,
                 mlp_ratio: float = 2.0, drop_path: float = 0.0, dropout: float = 0.0,
                 dt_rank: Optional[int] = None, noise_rng: Optional[np.random.Generator] = None):
        C = channels
        self.norm1 = LayerNorm(C)
        self.in_proj = Linear(C, C, rng)
        self.dwconv = Conv3d(C, C, 3, rng, groups=C)
        self.ss3d = SS3D(C, state_dim, orientation, rng, dt_rank)
        self.norm2 = LayerNorm(C)
        self.out_proj = Linear(C, C, rng, zero_init=True)
        self.norm3 = LayerNorm(C)
        self.noise = noise_rng if noise_rng is not None else np.random.default_rng(0)
        self.mlp = MLP(C, mlp_ratio, rng, dropout, self.noise)
        self.drop_path = drop_path

    @property
    def orientation(self) -> int:
        return self.ss3d.orientation

    def mixer(self, seq: Tensor, dims) -> Tensor:
        h = self.in_proj(self.norm1(seq))
        h = F.silu(F.channels_last(self.dwconv(F.channels_first(h, dims))))
        return self.out_proj(self.norm2(self.ss3d.forward_seq(h, dims)))

    def forward(self, x: Tensor) -> Tensor:
        dims = x.shape[1:]
        seq = F.channels_last(x)
        seq = seq + F.drop_path(self.mixer(seq, dims), self.drop_path, self.training, self.noise)
        seq = seq + F.drop_path(self.mlp(self.norm3(seq)), self.drop_path, self.training, self.noise)
        return F.channels_first(seq, dims)


class TriOrientedMamba(Module):
    """Gated Mamba mixer (expansion 2) over three orderings of the volume.

    Orderings: raster, reversed raster, and the raster of the (H, W, D)
    transposed volume.  Each has its own causal conv and S6; the summed
    result is gated by SiLU(z) and projected back.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator, expand: int = 2,
                 d_conv: int = 4, dt_rank: Optional[int] = None):
        E = expand * channels
        self.inner = E
        self.in_proj = Linear(channels, 2 * E, rng, bias=False)
        self.conv_w = ModuleList([_ConvParams(E, d_conv, rng) for _ in range(3)])
        self.ssm = ModuleList([S6(E, state_dim, rng, dt_rank or max(1, -(-channels // 16))) for _ in range(3)])
        self.out_proj = Linear(E, channels, rng, bias=False, zero_init=True)

    @staticmethod
    def orderings(dims) -> Tuple[np.ndarray, ...]:
        n = int(np.prod(dims))
        fwd = np.arange(n)
        trans = np.arange(n).reshape(dims).transpose(1, 2, 0).reshape(-1)
        return fwd, fwd[::-1].copy(), trans

    def forward_seq(self, seq: Tensor, dims) -> Tensor:
        E = self.inner
        xz = self.in_proj(seq)
        xs, z = xz[:, :E], xz[:, E:]
        outs = []
        for order, conv, ssm in zip(self.orderings(dims), self.conv_w, self.ssm):
            inv = np.argsort(order)
            u = F.silu(F.causal_conv1d(take_rows(xs, order, inv), conv.weight, conv.bias))
            outs.append(take_rows(ssm(u), inv, order))
        return self.out_proj(stack_sum(outs) * F.silu(z))


class _ConvParams(Module):
    def __init__(self, channels, k, rng):
        self.weight = uniform(rng, (channels, k), 1.0 / np.sqrt(k))
        self.bias = uniform(rng, (channels,), 1.0 / np.sqrt(k))


class TriOrientedBlock(Module):
    """VSS3D layout with the first residual module replaced by the tri-oriented mixer."""

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator, mlp_ratio: float = 2.0,
                 drop_path: float = 0.0, dropout: float = 0.0, dt_rank: Optional[int] = None,
                 noise_rng: Optional[np.random.Generator] = None, orientation: int = 0):
        C = channels
        self.norm1 = LayerNorm(C)
        self.mamba = TriOrientedMamba(C, state_dim, rng, dt_rank=dt_rank)
        self.norm3 = LayerNorm(C)
        self.noise = noise_rng if noise_rng is not None else np.random.default_rng(0)
        self.mlp = MLP(C, mlp_ratio, rng, dropout, self.noise)
        self.drop_path = drop_path
        self.orientation = orientation  # unused by the mixer; kept for reporting parity

    def forward(self, x: Tensor) -> Tensor:
        dims = x.shape[1:]
        seq = F.channels_last(x)
        seq = seq + F.drop_path(self.mamba.forward_seq(self.norm1(seq), dims), self.drop_path,
                                self.training, self.noise)
        seq = seq + F.drop_path(self.mlp(self.norm3(seq)), self.drop_path, self.training, self.noise)
        return F.channels_first(seq, dims)
