import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxmamba.paths import (dump_paths_csv, enumerate_paths, gather_sequence, group_paths, is_bijective,
                            is_continuous, path_for, scatter_back, serpentine_path, verify_paths)
from voxmamba.tensor import Tensor


def test_singleton():
    assert serpentine_path((1, 1, 1)).order.tolist() == [0]


def test_serpentine_2x2x2_coordinates():
    coords = [tuple(c) for c in serpentine_path((2, 2, 2)).coords()]
    assert coords == [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1), (1, 0, 0)]


def test_serpentine_3x4x5_adjacent():
    c = serpentine_path((3, 4, 5)).coords()
    steps = np.abs(np.diff(c, axis=0)).sum(axis=1)
    assert len(steps) == 59 and np.all(steps == 1)


@pytest.mark.parametrize("dims", [(0, 2, 2), (2, 2), (2, -1, 3)])
def test_bad_dims(dims):
    with pytest.raises(ValueError):
        serpentine_path(dims)
    with pytest.raises(ValueError):
        enumerate_paths(dims)


def test_48_pairwise_distinct():
    paths = enumerate_paths((3, 4, 5))
    assert len(paths) == 48
    for a, b in itertools.combinations(paths, 2):
        assert not np.array_equal(a.order, b.order)
    assert [(p.group_index, p.variant_index) for p in paths] == [(g, v) for g in range(6) for v in range(8)]


def test_singleton_paths_coincide():
    paths = enumerate_paths((1, 1, 1))
    assert len(paths) == 48 and all(p.order.tolist() == [0] for p in paths)


def test_group0_variant0_is_serpentine():
    assert np.array_equal(path_for((3, 4, 5), 0, 0).order, serpentine_path((3, 4, 5)).order)


def test_odd_variants_are_reversals():
    for g in range(6):
        for r in range(4):
            fwd, rev = path_for((2, 3, 5), g, 2 * r), path_for((2, 3, 5), g, 2 * r + 1)
            assert np.array_equal(fwd.order[::-1], rev.order)
            assert rev.reversed and not fwd.reversed and fwd.rotation == r


def test_group_paths():
    gp = group_paths((2, 3, 4), 3)
    assert len(gp) == 8 and all(p.group_index == 3 for p in gp)
    with pytest.raises(ValueError):
        group_paths((2, 3, 4), 6)


def test_gather_monotone_and_shape():
    dims = (3, 4, 5)
    p = path_for(dims, 2, 5)
    field = np.zeros(60)
    field[p.order] = np.arange(60)  # value = rank along the path
    seq = gather_sequence(Tensor(field.reshape((1,) + dims)), p)
    assert seq.shape == (60, 1) and np.all(np.diff(seq.data[:, 0]) > 0)
    assert gather_sequence(Tensor(np.zeros((3, 2, 2, 2))), serpentine_path((2, 2, 2))).shape == (8, 3)


def test_round_trip_all_paths_bitwise(rng):
    dims = (3, 4, 5)
    x = Tensor(rng.normal(size=(2,) + dims))
    for p in enumerate_paths(dims):
        assert np.array_equal(scatter_back(gather_sequence(x, p), p).data, x.data)


def test_scatter_zero_and_reversal_algebra(rng):
    dims = (2, 3, 4)
    assert not scatter_back(Tensor(np.zeros((24, 2))), serpentine_path(dims)).data.any()
    seq = rng.normal(size=(24, 2))
    fwd, rev = path_for(dims, 1, 2), path_for(dims, 1, 3)
    assert np.array_equal(scatter_back(Tensor(seq), rev).data, scatter_back(Tensor(seq[::-1].copy()), fwd).data)


def test_dims_mismatch_errors():
    p = serpentine_path((2, 2, 2))
    with pytest.raises(ValueError):
        gather_sequence(Tensor(np.zeros((1, 2, 2, 3))), p)
    with pytest.raises(ValueError):
        scatter_back(Tensor(np.zeros((7, 1))), p)


def test_gather_scatter_gradient_is_permutation(rng):
    p = path_for((2, 3, 4), 4, 6)
    x = Tensor(rng.normal(size=(2, 2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(24, 2))
    (gather_sequence(x, p) * w).sum().backward()
    assert np.array_equal(x.grad, scatter_back(Tensor(w), p).data)


def test_verify_reports():
    r = verify_paths((3, 4, 5))
    assert (r.bijective, r.continuous, r.distinct_count, r.n_paths) == (True, True, 48, 48)
    assert verify_paths((1, 1, 1)).distinct_count == 1
    r = verify_paths((2, 3, 4))
    assert r.bijective and r.continuous
    assert "distinct_count: 48" in r.lines()


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(1, 5)] * 3))
def test_every_path_bijective_and_continuous(dims):
    for p in enumerate_paths(dims):
        assert is_bijective(p) and is_continuous(p)
        assert np.array_equal(p.inverse[p.order], np.arange(p.order.size))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(2, 5), min_size=3, max_size=3, unique=True))
def test_distinct_extents_give_48_distinct(dims):
    assert verify_paths(dims).distinct_count == 48


def test_paths_are_cached_and_immutable():
    a, b = enumerate_paths((2, 3, 4)), enumerate_paths((2, 3, 4))
    assert all(x is y for x, y in zip(a, b))
    with pytest.raises(ValueError):
        a[0].order[0] = 5


def test_dump_csv(tmp_path):
    out = tmp_path / "p.csv"
    assert dump_paths_csv((2, 2, 2), str(out)) == 48 * 8
    lines = out.read_text().splitlines()
    assert lines[0] == "group,variant,t,x,y,z"
    assert lines[1:4] == ["0,0,0,0,0,0", "0,0,1,1,0,0", "0,0,2,1,1,0"]
