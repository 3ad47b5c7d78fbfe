"""Whole-volume segmentation: preprocessing, patch grid, inference and voting.

Patches are scored independently (optionally on a thread pool) but their
probabilities are always summed in grid order, so the label map does not
depend on how many workers ran or in which order they finished.
"""
from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, no_grad
from .volumes import ClassTable, CompatibilityError, LabelMap, Volume  # noqa: F401

logger = logging.getLogger(__name__)

Offset = Tuple[int, int, int]


class PipelineError(RuntimeError):
    """A precondition of the segmentation pipeline does not hold."""


# -- preprocessing --------------------------------------------------------------

@dataclass(frozen=True)
class AxisOps:
    """Output axis ``i`` is input axis ``permutation[i]``, flipped if ``flips[i]``."""

    permutation: Tuple[int, int, int] = (0, 1, 2)
    flips: Tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if sorted(self.permutation) != [0, 1, 2] or len(self.flips) != 3:
            raise ValueError(f"bad axis ops {self.permutation} / {self.flips}")

    @classmethod
    def parse(cls, text: str) -> "AxisOps":
        """``"2,-0,1"``: take input axes 2, 0 (flipped) and 1."""
        parts = [t.strip() for t in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"axis ops need three entries, got {text!r}")
        perm = tuple(int(t.lstrip("-")) for t in parts)
        return cls(perm, tuple(t.startswith("-") for t in parts))

    @property
    def is_identity(self) -> bool:
        return self.permutation == (0, 1, 2) and not any(self.flips)

    def apply(self, a: np.ndarray) -> np.ndarray:
        out = np.transpose(a, self.permutation)
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, ax)
        return np.ascontiguousarray(out)

    def invert(self, a: np.ndarray) -> np.ndarray:
        for ax, f in enumerate(self.flips):
            if f:
                a = np.flip(a, ax)
        return np.ascontiguousarray(np.transpose(a, np.argsort(self.permutation)))


def rescale_intensity(data: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant volume maps to zeros."""
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.zeros(data.shape, dtype=np.float32)
    return ((data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)


def _crop_pad_plan(dims, target):
    """Per axis: (crop_start, pad_before) for a centered crop or symmetric pad."""
    plan = []
    for n, t in zip(dims, target):
        if t < 1:
            raise ValueError(f"target extent must be positive, got {target}")
        d = t - n
        plan.append((0, d // 2) if d >= 0 else ((-d) // 2, 0))
    return tuple(plan)


def crop_or_pad(a: np.ndarray, target, fill=0) -> np.ndarray:
    plan = _crop_pad_plan(a.shape, target)
    out = np.full(tuple(target), fill, dtype=a.dtype)
    src, dst = [], []
    for (c, p), n, t in zip(plan, a.shape, target):
        k = min(n - c, t - p)
        src.append(slice(c, c + k))
        dst.append(slice(p, p + k))
    out[tuple(dst)] = a[tuple(src)]
    return out


def preprocess(v: Volume, target_dims: Optional[Sequence[int]] = None,
               axis_ops: Optional[AxisOps] = None) -> Volume:
    """Axis ops, then min-max rescale, then center crop / zero pad.

    The returned volume's ``meta["preprocess"]`` holds what
    :func:`restore_geometry` needs to map results back onto the input grid.
    """
    ops = axis_ops or AxisOps()
    data = rescale_intensity(ops.apply(v.data))
    conformed = data.shape
    target = tuple(int(t) for t in (target_dims or conformed))
    plan = _crop_pad_plan(conformed, target)
    out = crop_or_pad(data, target)
    info = {"input_dims": tuple(v.dims), "conformed_dims": conformed, "target_dims": target,
            "axis_ops": ops, "crop_pad": plan, "value_range": v.value_range}
    return Volume(out, v.orientation, {**v.meta, "preprocess": info})


def restore_geometry(indices: np.ndarray, info: Dict, fill: int = 0) -> np.ndarray:
    """Inverse of the crop/pad and axis ops recorded by :func:`preprocess`."""
    conformed = info["conformed_dims"]
    back = np.full(conformed, fill, dtype=indices.dtype)
    src, dst = [], []
    for (c, p), n, t in zip(info["crop_pad"], conformed, info["target_dims"]):
        k = min(n - c, t - p)
        src.append(slice(p, p + k))
        dst.append(slice(c, c + k))
    back[tuple(dst)] = indices[tuple(src)]
    return info["axis_ops"].invert(back)


# -- patch grid -----------------------------------------------------------------

def make_grid(dim: int, p: int, s: int) -> List[int]:
    """Offsets 0, s, 2s, ... with the last one clamped to ``dim - p``."""
    if p > dim:
        raise ValueError(f"patch size {p} exceeds extent {dim}")
    if s < 1 or p < 1:
        raise ValueError("patch size and stride must be positive")
    offsets = list(range(0, dim - p + 1, s))
    if offsets[-1] != dim - p:
        offsets.append(dim - p)
    return offsets


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    offsets: Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]

    @classmethod
    def for_dims(cls, dims: Sequence[int], p: int, s: int) -> "PatchGrid":
        return cls(p, s, tuple(tuple(make_grid(d, p, s)) for d in dims))

    @property
    def n_patches(self) -> int:
        return int(np.prod([len(o) for o in self.offsets]))

    def origins(self) -> List[Offset]:
        return list(itertools.product(*self.offsets))


def extract_patches(v: Volume, grid: PatchGrid) -> List[Tuple[Offset, Tensor]]:
    p = grid.patch_size
    return [(o, Tensor(v.data[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p][None]))
            for o in grid.origins()]


def coverage_count(dims: Sequence[int], grid: PatchGrid) -> np.ndarray:
    counts = np.zeros(tuple(dims), dtype=np.int32)
    p = grid.patch_size
    for o in grid.origins():
        counts[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += 1
    return counts


# -- voting ---------------------------------------------------------------------

class VoteAccumulator:
    """Running per-voxel sum of class probabilities."""

    def __init__(self, n_classes: int, dims: Sequence[int]):
        self.n_classes = n_classes
        self.dims = tuple(dims)
        self.votes = np.zeros((n_classes,) + self.dims, dtype=np.float32)
        self.covered = np.zeros(self.dims, dtype=bool)

    def add(self, offset: Offset, probs: np.ndarray) -> None:
        if probs.ndim != 4 or probs.shape[0] != self.n_classes:
            raise CompatibilityError(f"patch probabilities {probs.shape} do not match {self.n_classes} classes")
        box = tuple(slice(o, o + n) for o, n in zip(offset, probs.shape[1:]))
        if any(o < 0 or o + n > d for o, n, d in zip(offset, probs.shape[1:], self.dims)):
            raise ValueError(f"patch at {offset} of size {probs.shape[1:]} leaves the volume {self.dims}")
        self.votes[(slice(None),) + box] += probs
        self.covered[box] = True

    def result(self) -> np.ndarray:
        if not self.covered.all():
            raise PipelineError(f"{int((~self.covered).sum())} voxels are not covered by any patch")
        return np.argmax(self.votes, axis=0)  # first maximum = lowest class index


def reconstruct_votes(patches: Iterable[Tuple[Offset, object]], out_dims: Sequence[int],
                      class_table: Optional[ClassTable] = None) -> LabelMap:
    acc = None
    for offset, probs in patches:
        arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        if acc is None:
            acc = VoteAccumulator(arr.shape[0], out_dims)
        acc.add(offset, arr)
    if acc is None:
        raise PipelineError("no patches to reconstruct from")
    table = class_table or ClassTable.generic(acc.n_classes)
    if len(table) != acc.n_classes:
        raise CompatibilityError(f"class table has {len(table)} classes, patches carry {acc.n_classes}")
    return LabelMap(acc.result(), table)


# -- inference --------------------------------------------------------------------

@dataclass
class SegmentConfig:
    class_table: ClassTable
    stride: int = 16
    patch_size: Optional[int] = None  # default: the model's
    target_dims: Optional[Tuple[int, int, int]] = None
    axis_ops: AxisOps = field(default_factory=AxisOps)
    threads: int = 1


def _predict(model, patch: np.ndarray) -> np.ndarray:
    return model(Tensor(patch[None])).data


def predict_patches(model, data: np.ndarray, grid: PatchGrid, threads: int = 1):
    """Yield (offset, probabilities) in grid order; work fans out to ``threads`` workers."""
    p = grid.patch_size
    origins = grid.origins()

    def crop(o):
        return data[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p]

    if threads <= 1:
        for o in origins:
            yield o, _predict(model, crop(o))
        return
    window = 2 * threads  # bounds the number of patch outputs held at once
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, len(origins), window):
            chunk = origins[start:start + window]
            futures = [pool.submit(_predict, model, crop(o)) for o in chunk]
            for o, fut in zip(chunk, futures):
                yield o, fut.result()


def segment_volume(model, v: Volume, cfg: SegmentConfig) -> LabelMap:
    """Preprocess, score every grid patch, vote, and map back to the input grid."""
    n_classes = model.cfg.n_classes
    if len(cfg.class_table) != n_classes:
        raise CompatibilityError(f"model emits {n_classes} classes, class table has {len(cfg.class_table)}")
    p = cfg.patch_size or model.cfg.patch_size
    pre = preprocess(v, cfg.target_dims, cfg.axis_ops)
    if any(d < p for d in pre.dims):
        raise CompatibilityError(f"volume {pre.dims} is smaller than the patch size {p}")
    grid = PatchGrid.for_dims(pre.dims, p, cfg.stride)
    t0 = time.perf_counter()
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            acc = VoteAccumulator(n_classes, pre.dims)
            for o, probs in predict_patches(model, pre.data, grid, cfg.threads):
                acc.add(o, probs)
    finally:
        model.train(was_training)
    indices = restore_geometry(acc.result(), pre.meta["preprocess"])
    elapsed = time.perf_counter() - t0
    logger.info("segmented %s with %d patches in %.2fs", v.dims, grid.n_patches, elapsed)
    return LabelMap(indices, cfg.class_table, v.orientation,
                    {**v.meta, "n_patches": grid.n_patches, "seconds": elapsed})


# -- hippocampus pipeline ---------------------------------------------------------

def hippocampus_box(seg: LabelMap) -> Tuple[np.ndarray, np.ndarray]:
    """Inclusive (lo, hi) voxel bounds of the union of both hippocampus classes."""
    roles = seg.class_table.indices_with_role("hippocampus_left") + \
        seg.class_table.indices_with_role("hippocampus_right")
    if not roles:
        raise PipelineError("class table defines no hippocampus classes")
    mask = np.isin(seg.indices, roles)
    if not mask.any():
        raise PipelineError("no hippocampus voxels in the segmentation")
    coords = np.nonzero(mask)
    return np.array([c.min() for c in coords]), np.array([c.max() for c in coords])


def hippocampus_offset(seg: LabelMap, p: int) -> Offset:
    lo, hi = hippocampus_box(seg)
    extent = hi - lo + 1
    if np.any(extent > p):
        raise PipelineError(f"hippocampus bounding box {tuple(extent.tolist())} exceeds the {p}^3 patch")
    dims = np.array(seg.dims)
    if np.any(dims < p):
        raise CompatibilityError(f"volume {seg.dims} is smaller than the patch size {p}")
    center = (lo + hi) / 2.0
    offset = np.floor(center + 0.5).astype(int) - p // 2
    return tuple(int(x) for x in np.clip(offset, 0, dims - p))


def hippocampus_crop(seg: LabelMap, v: Volume, p: int = 96) -> Tuple[Offset, Tensor]:
    if tuple(seg.dims) != tuple(v.dims):
        raise CompatibilityError(f"segmentation {seg.dims} and volume {v.dims} differ in shape")
    o = hippocampus_offset(seg, p)
    return o, Tensor(v.data[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p][None])


def segment_hippocampus(model, v: Volume, seg: LabelMap, class_table: ClassTable,
                        p: Optional[int] = None) -> LabelMap:
    """Single-patch subfield segmentation placed into a background-filled map.

    ``v`` is the raw input volume; it is min-max rescaled here the same way
    the whole-volume pipeline does.
    """
    if len(class_table) != model.cfg.n_classes:
        raise CompatibilityError(f"model emits {model.cfg.n_classes} classes, class table has {len(class_table)}")
    p = p or model.cfg.patch_size
    scaled = Volume(rescale_intensity(v.data), v.orientation)
    o, patch = hippocampus_crop(seg, scaled, p)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            probs = model(patch).data
    finally:
        model.train(was_training)
    out = np.zeros(v.dims, dtype=np.int16)
    out[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] = np.argmax(probs, axis=0)
    return LabelMap(out, class_table, v.orientation, {**v.meta, "hippocampus_offset": o})
