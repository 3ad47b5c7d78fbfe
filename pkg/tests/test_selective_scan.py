import numpy as np
import pytest

from voxmamba import functional as F
from voxmamba.gradcheck import grad_check
from voxmamba.selective_scan import (S6, associative_scan, selective_scan, selective_scan_blocked,
                                     selective_scan_sequential)
from voxmamba.tensor import Tensor, no_grad, precision

from conftest import leaf


def instance(rng, L, C, N, dtype=np.float32):
    x = rng.normal(size=(L, C))
    delta = np.logaddexp(0, rng.normal(size=(L, C)) - 1.0)
    A = -np.exp(np.tile(np.log(np.arange(1, N + 1)), (C, 1)) + rng.normal(scale=0.1, size=(C, N)))
    B, Cm, D = rng.normal(size=(L, N)), rng.normal(size=(L, N)), rng.normal(size=C)
    return [np.asarray(a, dtype=dtype) for a in (x, delta, A, B, Cm, D)]


def test_associative_scan_matches_loop(rng):
    for T in (1, 2, 3, 7, 16, 33):
        a, b = rng.uniform(0.2, 1.0, size=(T, 3)), rng.normal(size=(T, 3))
        P, H = associative_scan(a, b)
        h, p = np.zeros(3), np.ones(3)
        for t in range(T):
            h, p = a[t] * h + b[t], p * a[t]
            assert np.allclose(H[t], h) and np.allclose(P[t], p)


def test_base_case_closed_form(rng):
    x, delta, A, B, Cm, D = instance(rng, 1, 3, 4, np.float64)
    expect = (Cm[0][None, :] * delta[0][:, None] * B[0][None, :] * x[0][:, None]).sum(1) + D * x[0]
    assert np.allclose(selective_scan_sequential(x, delta, A, B, Cm, D)[0], expect, atol=1e-12)


def test_vanishing_decay_is_weighted_cumsum(rng):
    x, delta, _, B, Cm, D = instance(rng, 20, 2, 3, np.float64)
    A = -np.exp(np.full((2, 3), -30.0))
    h = np.cumsum((delta * x)[:, :, None] * B[:, None, :], axis=0)
    expect = (h * Cm[:, None, :]).sum(-1) + D * x
    assert np.abs(selective_scan_sequential(x, delta, A, B, Cm, D) - expect).max() < 1e-5
    assert np.abs(selective_scan_blocked(x, delta, A, B, Cm, D)[0] - expect).max() < 1e-5


def test_zero_input_zero_output(rng):
    args = instance(rng, 9, 3, 4)
    args[0] = np.zeros_like(args[0])
    assert not selective_scan_sequential(*args).any()
    assert not selective_scan_blocked(*args)[0].any()


@pytest.mark.parametrize("L", [64, 257])
def test_scan_matches_sequential(rng, L):
    args = instance(rng, L, 4, 16)
    diff = np.abs(selective_scan_blocked(*args)[0] - selective_scan_sequential(*args)).max()
    assert diff < 1e-5


def test_length_one_bitwise(rng):
    args = instance(rng, 1, 4, 16)
    assert np.array_equal(selective_scan_blocked(*args)[0], selective_scan_sequential(*args))


def test_equivalence_property_100_seeds():
    worst32 = worst64 = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        L, C, N = int(r.integers(1, 257)), int(r.integers(1, 9)), int(r.choice([4, 16, 64]))
        args = instance(np.random.default_rng(seed + 1000), L, C, N, np.float32)
        worst32 = max(worst32, np.abs(selective_scan_blocked(*args)[0] - selective_scan_sequential(*args)).max())
        a64 = [a.astype(np.float64) for a in args]
        worst64 = max(worst64, np.abs(selective_scan_blocked(*a64)[0] - selective_scan_sequential(*a64)).max())
    assert worst32 < 1e-5 and worst64 < 1e-10


@pytest.mark.parametrize("block", [1, 2, 5, 100])
def test_block_size_does_not_change_result(rng, block):
    args = instance(rng, 23, 2, 4, np.float64)
    ref = selective_scan_sequential(*args)
    assert np.abs(selective_scan_blocked(*args, block=block)[0] - ref).max() < 1e-12


def test_causality_bitwise(rng):
    args = instance(rng, 30, 3, 8)
    y0 = selective_scan_blocked(*args)[0]
    x2 = args[0].copy()
    x2[12] += 3.0
    y1 = selective_scan_blocked(x2, *args[1:])[0]
    assert np.array_equal(y0[:12], y1[:12]) and not np.array_equal(y0[12:], y1[12:])


def test_states_bounded(rng):
    x, delta, A, B, Cm, D = instance(rng, 500, 2, 4, np.float64)
    assert np.all(np.exp(delta[:, :, None] * A[None]) < 1)
    x = np.clip(x, -1, 1)
    y = selective_scan_sequential(x, delta, A, B, Cm, np.zeros_like(D))
    assert np.isfinite(y).all() and np.abs(y).max() < 50


@pytest.mark.parametrize("mode", ["scan", "sequential"])
def test_gradcheck_small(f64, rng, mode):
    x, delta, A, B, Cm, D = [leaf(a) for a in instance(rng, 6, 2, 4, np.float64)]
    w = rng.normal(size=(6, 2))
    r = grad_check(lambda: (selective_scan(x, delta, A, B, Cm, D, mode) * w).sum(), [x, delta, A, B, Cm, D])
    assert r.max_rel_error < 1e-4, str(r)


def test_gradcheck_multi_block(f64, rng):
    ts = [leaf(a) for a in instance(rng, 11, 3, 2, np.float64)]
    w = rng.normal(size=(11, 3))
    assert grad_check(lambda: (selective_scan(*ts) * w).sum(), ts).passed


def test_zero_upstream_zero_grads_and_dskip_closed_form(f64, rng):
    ts = [leaf(a) for a in instance(rng, 7, 2, 3, np.float64)]
    selective_scan(*ts).backward(np.zeros((7, 2)))
    assert all(not t.grad.any() for t in ts)
    for t in ts:
        t.zero_grad()
    up = rng.normal(size=(7, 2))
    selective_scan(*ts).backward(up)
    assert np.allclose(ts[5].grad, (up * ts[0].data).sum(0))


def test_backward_without_forward_state_recomputes(f64, rng):
    ts = [leaf(a) for a in instance(rng, 5, 2, 3, np.float64)]
    seq = selective_scan(*ts, mode="sequential")
    seq.sum().backward()
    g_seq = [t.grad.copy() for t in ts]
    for t in ts:
        t.zero_grad()
    selective_scan(*ts).sum().backward()
    for a, t in zip(g_seq, ts):
        assert np.allclose(a, t.grad, atol=1e-10)


def test_bad_inputs():
    z = Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        selective_scan(z, Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((4, 2))),
                       Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        selective_scan(z, z, Tensor(np.zeros((2, 2))), z, z, Tensor(np.zeros(2)), mode="fast")


# -- S6 parameters -----------------------------------------------------------

def test_s6_gates():
    s6 = S6(8, 16, np.random.default_rng(0))
    s6.dt_bias.data[:] = 0
    delta, B, Cm = s6.compute_gates(Tensor(np.zeros((5, 8))))
    assert np.allclose(delta.data, np.log(2.0), atol=1e-6)
    assert B.shape == (5, 16) and Cm.shape == (5, 16)
    d2, _, _ = s6.compute_gates(Tensor(np.random.default_rng(1).normal(scale=30, size=(50, 8))))
    assert np.all(d2.data > 0)


def test_s6_initialisation_and_invariants():
    s6 = S6(32, 16, np.random.default_rng(0))
    assert np.all(s6.A().data < 0)
    assert np.allclose(s6.A_log.data[0], np.log(np.arange(1, 17)), atol=1e-6)
    assert np.all(s6.D_skip.data == 1) and s6.dt_rank == 2
    assert s6.num_parameters() == 32 * 16 + 32 + 2 * 32 * 2 + 32 + 2 * 16 * 32


def test_s6_modes_agree_and_channel_check():
    s6 = S6(4, 8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(40, 4)))
    with no_grad():
        assert np.abs(s6(x, "scan").data - s6(x, "sequential").data).max() < 1e-5
    with pytest.raises(ValueError):
        s6(Tensor(np.zeros((3, 5))))


def test_s6_full_gradcheck(f64):
    s6 = S6(3, 4, np.random.default_rng(0))
    s6.astype(np.float64)
    x = leaf(np.random.default_rng(2).normal(size=(6, 3)))
    w = np.random.default_rng(3).normal(size=(6, 3))
    params = [x] + [p for _, p in s6.named_parameters()]
    r = grad_check(lambda: (s6(x) * w).sum(), params)
    assert r.max_rel_error < 1e-4, str(r)
