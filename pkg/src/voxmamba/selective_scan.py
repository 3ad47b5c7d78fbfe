"""Input-dependent (selective) state-space recurrence.

For every channel c and state n::

    a_t = exp(delta_t[c] * A[c, n])
    h_t = a_t * h_{t-1} + delta_t[c] * B_t[n] * x_t[c],   h_0 = 0
    y_t[c] = sum_n C_t[n] * h_t[c, n] + D[c] * x_t[c]

Two evaluators are provided: a plain step loop (the reference) and a
blocked associative scan over the pairs (a_t, b_t) with operator
``(a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)``.  The backward pass keeps only
the block-boundary states and recomputes the rest block by block.
"""
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from . import functional as F
from .nn import Module, constant, uniform
from .tensor import Parameter, Tensor, get_default_dtype, is_grad_enabled


def associative_scan(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inclusive scan along axis 0 of ``h_t = a_t h_{t-1} + b_t`` from ``h_0 = 0``.

    Returns ``(P, H)`` with ``P_t = a_1 ... a_t`` and ``H_t`` the state, so a
    nonzero initial state ``h0`` contributes ``P_t * h0``.  Work-efficient
    odd/even recursion: pairs are combined, the half-length problem is
    solved, and the even positions are filled from their odd predecessors.
    """
    T = a.shape[0]
    if T == 1:
        return a, b
    n2 = T // 2
    a_e, a_o = a[0:2 * n2:2], a[1:2 * n2:2]
    b_e, b_o = b[0:2 * n2:2], b[1:2 * n2:2]
    P_half, H_half = associative_scan(a_e * a_o, a_o * b_e + b_o)
    P = np.empty_like(a)
    H = np.empty_like(b)
    P[1:2 * n2:2] = P_half
    H[1:2 * n2:2] = H_half
    P[0] = a[0]
    H[0] = b[0]
    if T > 2:
        prev_P, prev_H = P[1:T - 1:2], H[1:T - 1:2]
        P[2::2] = prev_P * a[2::2]
        H[2::2] = a[2::2] * prev_H + b[2::2]
    return P, H


def _readout(h: np.ndarray, Cm: np.ndarray) -> np.ndarray:
    # h: (T, C, N), Cm: (T, N) -> (T, C); shared by both evaluators
    return (h * Cm[:, None, :]).sum(axis=-1)


def _block(L: int) -> int:
    return max(1, math.isqrt(L - 1) + 1) if L > 1 else 1


def selective_scan_sequential(x, delta, A, B, Cm, D) -> np.ndarray:
    """Reference evaluator: one recurrence step at a time."""
    L, C = x.shape
    h = np.zeros((C, A.shape[1]), dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(L):
        a = np.exp(delta[t][:, None] * A)
        h = a * h + (delta[t] * x[t])[:, None] * B[t][None, :]
        y[t] = _readout(h[None], Cm[t:t + 1])[0] + D * x[t]
    return y


def _block_terms(x, delta, A, B, s, e):
    a = np.exp(delta[s:e, :, None] * A[None])
    u = (delta[s:e] * x[s:e])[:, :, None] * B[s:e, None, :]
    return a, u


def selective_scan_blocked(x, delta, A, B, Cm, D, block: Optional[int] = None,
                           keep_states: bool = False):
    """Blocked associative-scan evaluator.

    Returns ``y`` and, with ``keep_states``, the list of states entering
    each block (what the backward pass needs to recompute a block).
    """
    L, C = x.shape
    N = A.shape[1]
    K = block or _block(L)
    h = np.zeros((C, N), dtype=x.dtype)
    y = np.empty_like(x)
    carries = []
    for s in range(0, L, K):
        e = min(L, s + K)
        if keep_states:
            carries.append(h)
        a, u = _block_terms(x, delta, A, B, s, e)
        P, H = associative_scan(a, u)
        hs = P * h + H
        y[s:e] = _readout(hs, Cm[s:e]) + D * x[s:e]
        h = hs[-1]
    return y, (carries, K)


def selective_scan_backward(gy, x, delta, A, B, Cm, D, carries, K):
    """Gradients w.r.t. (x, delta, A, B, Cm, D), sweeping blocks in reverse."""
    L, C = x.shape
    N = A.shape[1]
    gx = np.empty_like(x)
    gdelta = np.empty_like(delta)
    gA = np.zeros_like(A)
    gB = np.empty_like(B)
    gC = np.empty_like(Cm)
    next_a = np.ones((C, N), dtype=x.dtype)
    next_dh = np.zeros((C, N), dtype=x.dtype)
    starts = list(range(0, L, K))
    for bi in reversed(range(len(starts))):
        s = starts[bi]
        e = min(L, s + K)
        a, u = _block_terms(x, delta, A, B, s, e)
        P, H = associative_scan(a, u)
        h0 = carries[bi]
        hs = P * h0 + H
        h_prev = np.concatenate([h0[None], hs[:-1]], axis=0)
        g = gy[s:e, :, None] * Cm[s:e, None, :]
        # dh_t = g_t + a_{t+1} dh_{t+1}: forward scan over the reversed block
        mult = np.concatenate([a[1:], next_a[None]], axis=0)[::-1]
        Pr, Hr = associative_scan(np.ascontiguousarray(mult), np.ascontiguousarray(g[::-1]))
        dh = (Pr * next_dh + Hr)[::-1]
        ga = dh * h_prev * a
        dt, xt = delta[s:e], x[s:e]
        dhB = (dh * B[s:e, None, :]).sum(axis=-1)
        gdelta[s:e] = (ga * A[None]).sum(axis=-1) + dhB * xt
        gA += (ga * dt[:, :, None]).sum(axis=0)
        gB[s:e] = np.einsum("tcn,tc->tn", dh, dt * xt)
        gx[s:e] = dhB * dt + D * gy[s:e]
        gC[s:e] = np.einsum("tc,tcn->tn", gy[s:e], hs)
        next_a, next_dh = a[0], dh[0]
    gD = (gy * x).sum(axis=0)
    return gx, gdelta, gA, gB, gC, gD


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, Cm: Tensor, D: Tensor,
                   mode: str = "scan") -> Tensor:
    """Differentiable selective scan over ``x`` of shape (L, C)."""
    if x.ndim != 2 or delta.shape != x.shape:
        raise ValueError(f"x {x.shape} and delta {delta.shape} must both be (L, C)")
    args = [t.data for t in (x, delta, A, B, Cm, D)]
    if mode == "sequential":
        y = selective_scan_sequential(*args)
        state = None
    elif mode == "scan":
        keep = is_grad_enabled() and any(t.requires_grad for t in (x, delta, A, B, Cm, D))
        y, state = selective_scan_blocked(*args, keep_states=keep)
    else:
        raise ValueError(f"unknown scan mode {mode!r}")

    def backward(g):
        carries, K = state if state is not None else selective_scan_blocked(*args, keep_states=True)[1]
        return selective_scan_backward(g, *args, carries, K)

    return Tensor._from_op(y, (x, delta, A, B, Cm, D), backward, "selective_scan")


class S6(Module):
    """Parameters of one selective-scan branch (expansion factor 1).

    Step sizes come from a low-rank projection followed by softplus; B and C
    are linear in the input and shared across channels.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator,
                 dt_rank: Optional[int] = None, dt_min: float = 1e-3, dt_max: float = 1e-1):
        C, N = channels, state_dim
        R = dt_rank or max(1, C // 16)
        dtype = get_default_dtype()
        self.channels, self.state_dim, self.dt_rank = C, N, R
        self.A_log = Parameter(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (C, 1)).astype(dtype))
        self.D_skip = constant((C,), 1.0)
        self.W_dt_down = uniform(rng, (R, C), 1.0 / math.sqrt(C))
        self.W_dt_up = uniform(rng, (C, R), 1.0 / math.sqrt(R))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=C))
        self.dt_bias = Parameter((dt + np.log(-np.expm1(-dt))).astype(dtype))  # inverse softplus
        self.W_B = uniform(rng, (N, C), 1.0 / math.sqrt(C))
        self.W_C = uniform(rng, (N, C), 1.0 / math.sqrt(C))

    def A(self) -> Tensor:
        return -F.exp(self.A_log)

    def compute_gates(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        delta = F.softplus(F.linear(F.linear(x, self.W_dt_down), self.W_dt_up, self.dt_bias))
        return delta, F.linear(x, self.W_B), F.linear(x, self.W_C)

    def forward(self, x: Tensor, mode: str = "scan") -> Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"S6 expects {self.channels} channels, got {x.shape[-1]}")
        delta, B, Cm = self.compute_gates(x)
        return selective_scan(x, delta, self.A(), B, Cm, self.D_skip, mode)
