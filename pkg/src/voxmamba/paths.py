"""Continuous traversal orders that linearise a 3D voxel grid.

A path is a permutation of flat (C-order) voxel indices.  The canonical
order is a boustrophedon raster: the fastest axis reverses direction on
every row and the row order reverses on every slice, so consecutive voxels
always share a face.  The 48 orders come from 6 axis transpositions
(orientation groups) x 4 quarter turns about the slowest transposed axis
x 2 directions.
"""
from __future__ import annotations

import csv
import functools
import itertools
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor, take_rows

AXIS_PERMUTATIONS: Tuple[Tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))
N_GROUPS = len(AXIS_PERMUTATIONS)
N_VARIANTS = 8


@dataclass(frozen=True, eq=False)
class TraversalPath:
    dims: Tuple[int, int, int]
    order: np.ndarray
    inverse: np.ndarray
    group_index: int = 0
    variant_index: int = 0

    @property
    def rotation(self) -> int:
        return self.variant_index // 2

    @property
    def reversed(self) -> bool:
        return bool(self.variant_index % 2)

    def coords(self) -> np.ndarray:
        """(L, 3) voxel coordinates in traversal order."""
        return np.stack(np.unravel_index(self.order, self.dims), axis=1)


def _check_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive extents, got {dims}")
    return dims


def _snake(grid: np.ndarray) -> np.ndarray:
    """Boustrophedon flattening of a 3D array of labels."""
    D = grid.shape[0]
    plane = grid.copy()
    plane[:, 1::2, :] = plane[:, 1::2, ::-1]
    rows = plane.reshape(D, -1)
    rows[1::2] = rows[1::2, ::-1].copy()
    return rows.reshape(-1)


def _make(dims, order, group, variant) -> TraversalPath:
    order = np.ascontiguousarray(order, dtype=np.int64)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    order.setflags(write=False)
    inverse.setflags(write=False)
    return TraversalPath(dims, order, inverse, group, variant)


def serpentine_path(dims: Sequence[int]) -> TraversalPath:
    dims = _check_dims(dims)
    labels = np.arange(int(np.prod(dims))).reshape(dims)
    return _make(dims, _snake(labels), 0, 0)


def path_for(dims: Sequence[int], group: int, variant: int) -> TraversalPath:
    dims = _check_dims(dims)
    return _paths_cached(dims)[group * N_VARIANTS + variant]


@functools.lru_cache(maxsize=64)
def _paths_cached(dims: Tuple[int, int, int]) -> Tuple[TraversalPath, ...]:
    labels = np.arange(int(np.prod(dims))).reshape(dims)
    out = []
    for g, perm in enumerate(AXIS_PERMUTATIONS):
        moved = np.transpose(labels, perm)
        for r in range(4):
            rotated = np.rot90(moved, k=r, axes=(1, 2))
            base = _snake(rotated)
            for f in range(2):
                out.append(_make(dims, base[::-1] if f else base, g, 2 * r + f))
    return tuple(out)


def enumerate_paths(dims: Sequence[int]) -> List[TraversalPath]:
    """All 48 paths, ordered by (group, variant) with variant = 2*rotation + reversal."""
    return list(_paths_cached(_check_dims(dims)))


def group_paths(dims: Sequence[int], group: int) -> List[TraversalPath]:
    if not 0 <= group < N_GROUPS:
        raise ValueError(f"orientation group must be in 0..5, got {group}")
    return list(_paths_cached(_check_dims(dims))[group * N_VARIANTS:(group + 1) * N_VARIANTS])


def gather_sequence(features: Tensor, path: TraversalPath) -> Tensor:
    """(C, D, H, W) -> (L, C) with row t the feature vector of voxel ``order[t]``."""
    if tuple(features.shape[1:]) != path.dims:
        raise ValueError(f"feature dims {features.shape[1:]} != path dims {path.dims}")
    C = features.shape[0]
    return take_rows(features.reshape(C, -1).T, path.order, path.inverse)


def scatter_back(seq: Tensor, path: TraversalPath) -> Tensor:
    """Exact inverse of :func:`gather_sequence`."""
    L = int(np.prod(path.dims))
    if seq.shape[0] != L:
        raise ValueError(f"sequence length {seq.shape[0]} != {L} voxels")
    C = seq.shape[1]
    return take_rows(seq, path.inverse, path.order).T.reshape((C,) + path.dims)


@dataclass
class PathReport:
    dims: Tuple[int, int, int]
    n_paths: int
    bijective: bool
    continuous: bool
    distinct_count: int

    def lines(self) -> List[str]:
        return [f"dims: {','.join(map(str, self.dims))}", f"paths: {self.n_paths}",
                f"bijective: {self.bijective}", f"continuous: {self.continuous}",
                f"distinct_count: {self.distinct_count}"]


def is_continuous(path: TraversalPath) -> bool:
    c = path.coords()
    return bool(np.all(np.abs(np.diff(c, axis=0)).sum(axis=1) == 1))


def is_bijective(path: TraversalPath) -> bool:
    n = int(np.prod(path.dims))
    return path.order.size == n and bool(np.array_equal(np.sort(path.order), np.arange(n)))


def verify_paths(dims: Sequence[int]) -> PathReport:
    paths = enumerate_paths(dims)
    distinct = {p.order.tobytes() for p in paths}
    return PathReport(
        dims=paths[0].dims,
        n_paths=len(paths),
        bijective=all(is_bijective(p) and np.array_equal(p.inverse[p.order], np.arange(p.order.size))
                      for p in paths),
        continuous=all(is_continuous(p) for p in paths),
        distinct_count=len(distinct),
    )


def dump_paths_csv(dims: Sequence[int], path: str) -> int:
    """Write every path as rows (group, variant, t, x, y, z); returns row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "variant", "t", "x", "y", "z"])
        for p in enumerate_paths(dims):
            for t, (z, y, x) in enumerate(p.coords()):
                w.writerow([p.group_index, p.variant_index, t, x, y, z])
                rows += 1
    return rows
