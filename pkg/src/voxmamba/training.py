"""Losses, schedule, optimizer, the accumulation training loop and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pipeline import rescale_intensity
from .tensor import Tensor
from .volumes import ClassTable, LabelMap, Volume

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
LOG_FLOOR = 1e-12


class DivergenceError(FloatingPointError):
    """Loss or gradients stopped being finite."""


# -- losses ---------------------------------------------------------------------

def one_hot(indices: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= n_classes):
        raise ValueError(f"class index outside 0..{n_classes - 1}")
    return (np.arange(n_classes).reshape((-1,) + (1,) * indices.ndim) == indices[None]).astype(dtype)


def dice_loss(probs: Tensor, target_onehot, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over all classes of the soft Dice coefficient."""
    t = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot)
    if t.shape != probs.shape:
        raise ValueError(f"dice_loss: target {t.shape} vs probabilities {probs.shape}")
    K = probs.shape[0]
    p2 = probs.reshape(K, -1)
    t2 = t.reshape(K, -1).astype(probs.dtype)
    inter = (p2 * t2).sum(axis=1)
    ratio = (inter * 2.0 + eps) / (p2.sum(axis=1) + (t2.sum(axis=1) + eps))
    return 1.0 - ratio.mean()


def weighted_cross_entropy(probs: Tensor, target: np.ndarray, weights) -> Tensor:
    """-sum_v w[t_v] ln p_{t_v} / sum_v w[t_v], with ln clamped at 1e-12."""
    K = probs.shape[0]
    t = np.asarray(target).reshape(-1)
    if t.size != probs.size // K:
        raise ValueError(f"target has {t.size} voxels, probabilities have {probs.size // K}")
    if t.min() < 0 or t.max() >= K:
        raise ValueError(f"class index outside 0..{K - 1}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (K,) or np.any(w <= 0):
        raise ValueError("weights must be K positive numbers")
    flat = probs.data.reshape(K, -1)
    cols = np.arange(t.size)
    pt = flat[t, cols]
    keep = pt > LOG_FLOOR
    pc = np.where(keep, pt, LOG_FLOOR)
    wv = w[t]
    total = wv.sum()
    value = -(wv * np.log(pc)).sum() / total

    def backward(g):
        grad = np.zeros(flat.shape, dtype=probs.dtype)
        grad[t, cols] = (-g * wv * keep / (pc * total)).astype(probs.dtype)
        return (grad.reshape(probs.shape),)

    return Tensor._from_op(np.asarray(value, dtype=probs.dtype), (probs,), backward, "wce")


DEFAULT_SCHEDULE = {0: ("dice", "wce"), 1: ("dice",)}


def loss_terms(epoch: int, schedule: Optional[Dict[int, Sequence[str]]] = None) -> Tuple[str, ...]:
    """Terms active at ``epoch``: the entry with the largest key not above it."""
    sched = {int(k): tuple(v) for k, v in (schedule or DEFAULT_SCHEDULE).items()}
    keys = [k for k in sched if k <= epoch]
    if not keys:
        raise ValueError(f"loss schedule has no entry for epoch {epoch}")
    terms = sched[max(keys)]
    unknown = set(terms) - {"dice", "wce"}
    if unknown or not terms:
        raise ValueError(f"bad loss terms {terms}")
    return terms


def combined_loss(epoch: int, probs: Tensor, target: np.ndarray, weights=None,
                  schedule: Optional[Dict[int, Sequence[str]]] = None) -> Tensor:
    K = probs.shape[0]
    terms = loss_terms(epoch, schedule)
    loss = None
    if "dice" in terms:
        loss = dice_loss(probs, one_hot(target, K, probs.dtype))
    if "wce" in terms:
        wce = weighted_cross_entropy(probs, target, np.ones(K) if weights is None else weights)
        loss = wce if loss is None else loss + wce
    return loss


def median_frequency_weights(label_maps: Sequence[np.ndarray], n_classes: int) -> np.ndarray:
    """w_k = median(f) / f_k, f_k = count_k / voxels of the images containing k.

    Classes absent from every map get weight 1.
    """
    counts = np.zeros(n_classes)
    present_voxels = np.zeros(n_classes)
    for lm in label_maps:
        c = np.bincount(np.asarray(lm).reshape(-1), minlength=n_classes)[:n_classes]
        counts += c
        present_voxels += (c > 0) * lm.size
    seen = counts > 0
    freq = np.where(seen, counts / np.maximum(present_voxels, 1), 0.0)
    weights = np.ones(n_classes)
    if seen.any():
        weights[seen] = np.median(freq[seen]) / freq[seen]
    return weights


# -- schedule and optimizer ------------------------------------------------------

@dataclass(frozen=True)
class CosineWarmRestarts:
    lr_max: float
    lr_min: float
    T_0: int
    T_mult: int = 2

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("T_0 and T_mult must be at least 1")

    def cycle(self, step: int) -> Tuple[int, int]:
        """(t_cur, T_i) for ``step``."""
        if step < 0:
            raise ValueError("step must be non-negative")
        if self.T_mult == 1:
            return step % self.T_0, self.T_0
        t, T = step, self.T_0
        while t >= T:
            t -= T
            T *= self.T_mult
        return t, T

    def lr_at(self, step: int) -> float:
        t, T = self.cycle(step)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * t / T))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
               lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Decoupled decay (p -= lr*wd*p), then a bias-corrected Adam update."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {i}; step aborted")
    b1, b2 = betas
    t = state.t + 1
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    # compute everything first so a non-finite moment leaves params and state untouched
    staged = []
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
            if g is None:
                staged.append(None)
                continue
            m_new = b1 * m + (1 - b1) * g
            v_new = b2 * v + (1 - b2) * g * g
            update = lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
            if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(update))):
                raise DivergenceError(f"optimizer moments overflowed for parameter {i}; step aborted")
            staged.append((m_new, v_new, update))
    state.t = t
    for i, (p, st) in enumerate(zip(params, staged)):
        if weight_decay:
            p.data *= p.data.dtype.type(1 - lr * weight_decay)
        if st is not None:
            state.m[i], state.v[i] = st[0].astype(p.data.dtype), st[1].astype(p.data.dtype)
            p.data -= st[2].astype(p.data.dtype)
        p.bump_version()


class AdamW:
    def __init__(self, params: Sequence[Tensor], weight_decay: float = 1e-2, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros(self.params)

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr, self.weight_decay,
                   self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.state.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"optim.m.{i}"] = m
            out[f"optim.v.{i}"] = v
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        self.state.t = int(tensors["optim.t"][0])
        for i in range(len(self.params)):
            self.state.m[i] = np.array(tensors[f"optim.m.{i}"], dtype=self.params[i].data.dtype)
            self.state.v[i] = np.array(tensors[f"optim.v.{i}"], dtype=self.params[i].data.dtype)


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 15
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    T_0: Optional[int] = None  # default: one epoch of optimizer steps
    T_mult: int = 2
    weight_decay: float = 1e-2
    accumulation_count: Optional[int] = None  # default: every patch of one scan
    patches_per_axis: int = 3
    random_offsets: bool = False
    seed: int = 0
    loss_schedule: Dict[int, List[str]] = field(default_factory=lambda: {0: ["dice", "wce"], 1: ["dice"]})
    class_weights: Optional[List[float]] = None  # default: median-frequency balancing

    def validate(self) -> None:
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.T_0 is not None and self.T_0 < 1:
            raise ValueError("T_0 must be at least 1")
        if self.accumulation_count is not None and self.accumulation_count < 1:
            raise ValueError("accumulation_count must be at least 1")
        if self.epochs < 0 or self.patches_per_axis < 1:
            raise ValueError("epochs must be >= 0 and patches_per_axis >= 1")
        loss_terms(0, self.loss_schedule)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        tc = cls(**d)
        tc.loss_schedule = {int(k): list(v) for k, v in tc.loss_schedule.items()}
        tc.validate()
        return tc


def patch_offsets(dims: Sequence[int], p: int, per_axis: int, rng: Optional[np.random.Generator] = None):
    """``per_axis`` evenly spread offsets per axis (first 0, last dim - p); optional jitter."""
    axes = []
    for d in dims:
        if p > d:
            raise ValueError(f"patch size {p} exceeds extent {d}")
        offs = np.unique(np.round(np.linspace(0, d - p, per_axis)).astype(int))
        if rng is not None:
            offs = rng.integers(0, d - p + 1, size=len(offs))
        axes.append(offs.tolist())
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


@dataclass
class TrainResult:
    records: List[dict]
    step: int
    epoch: int


def train(model, dataset: Sequence[Tuple[Volume, LabelMap]], tc: TrainConfig,
          optimizer: Optional[AdamW] = None, start_epoch: int = 0, start_step: int = 0,
          log_path: Optional[str] = None,
          on_epoch_end: Optional[Callable[[int, int, AdamW], None]] = None) -> TrainResult:
    """One optimizer step per ``accumulation_count`` patches (default: per scan).

    Gradients of a window are averaged.  Dropout noise and random offsets
    are reseeded per epoch so a resumed run matches an uninterrupted one.
    """
    tc.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    K = model.cfg.n_classes
    p = model.cfg.patch_size
    volumes = [rescale_intensity(v.data) for v, _ in dataset]
    labels = [lm.indices.astype(np.int64) for _, lm in dataset]
    weights = np.asarray(tc.class_weights if tc.class_weights is not None
                         else median_frequency_weights(labels, K), dtype=np.float64)
    per_scan = len(patch_offsets(volumes[0].shape, p, tc.patches_per_axis))
    acc = tc.accumulation_count or per_scan
    steps_per_epoch = sum(-(-len(patch_offsets(v.shape, p, tc.patches_per_axis)) // acc) for v in volumes)
    sched = CosineWarmRestarts(tc.lr_max, tc.lr_min, tc.T_0 or steps_per_epoch, tc.T_mult)
    opt = optimizer or AdamW(model.parameters(), tc.weight_decay)
    records: List[dict] = []
    log = open(log_path, "a") if log_path else None
    step = start_step
    try:
        for epoch in range(start_epoch, tc.epochs):
            model.train()
            model.reseed_noise(tc.seed * 1_000_003 + epoch)
            rng = np.random.default_rng([tc.seed, epoch]) if tc.random_offsets else None
            for scan_id, (vol, lab) in enumerate(zip(volumes, labels)):
                offsets = patch_offsets(vol.shape, p, tc.patches_per_axis, rng)
                for start in range(0, len(offsets), acc):
                    window = offsets[start:start + acc]
                    opt.zero_grad()
                    total = 0.0
                    for o in window:
                        box = tuple(slice(a, a + p) for a in o)
                        probs = model(Tensor(vol[box][None]))
                        loss = combined_loss(epoch, probs, lab[box], weights, tc.loss_schedule)
                        (loss * (1.0 / len(window))).backward()
                        total += loss.item() / len(window)
                    if not math.isfinite(total):
                        raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch}, scan {scan_id})")
                    lr = sched.lr_at(step)
                    opt.step(lr)
                    rec = {"step": step, "epoch": epoch, "scan_id": scan_id, "loss": total, "lr": lr}
                    records.append(rec)
                    if log:
                        log.write(json.dumps(rec) + "\n")
                        log.flush()
                    logger.debug("step %d epoch %d scan %d loss %.5f lr %.3g", step, epoch, scan_id, total, lr)
                    step += 1
            if on_epoch_end:
                on_epoch_end(epoch, step, opt)
    finally:
        if log:
            log.close()
    return TrainResult(records, step, tc.epochs)


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    label: int
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]

    def mask(self, dims) -> np.ndarray:
        grids = np.ogrid[tuple(slice(0, d) for d in dims)]
        r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grids, self.center, self.radii))
        return r <= 1.0


@dataclass
class SyntheticSpec:
    size: int = 48
    n_classes: int = 6
    count: int = 4
    shapes: Optional[List[Ellipsoid]] = None  # fixed layout; default: jittered per sample
    means: Optional[List[float]] = None
    noise_sigma: float = 0.05
    jitter: float = 0.08

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if self.size < 8 or self.count < 1:
            raise ValueError("size must be >= 8 and count >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.means is not None and len(self.means) != self.n_classes:
            raise ValueError("need one intensity mean per class")
        if self.shapes is not None:
            for s in self.shapes:
                if not 1 <= s.label < self.n_classes:
                    raise ValueError(f"shape label {s.label} outside 1..{self.n_classes - 1}")


def synthetic_class_table(n_classes: int) -> ClassTable:
    """Generic table; the two last classes play left/right hippocampus when K >= 4."""
    return ClassTable.generic(n_classes, (n_classes - 2, n_classes - 1) if n_classes >= 4 else None)


def _default_layout(spec: SyntheticSpec, rng: np.random.Generator) -> List[Ellipsoid]:
    S = spec.size
    c = (S - 1) / 2.0
    j = spec.jitter * S

    def wobble(x):
        return float(x + rng.uniform(-j, j) * 0.25)

    outer = Ellipsoid(1, tuple(wobble(c) for _ in range(3)),
                      tuple(float(S * rng.uniform(0.36, 0.42)) for _ in range(3)))
    shapes = [outer]
    n_inner = spec.n_classes - 2
    if n_inner <= 0:
        return shapes
    # inner blobs sit on a ring inside the outer ellipsoid, far enough apart to stay disjoint
    ring = 0.5 * min(outer.radii)
    small = min(0.95 * ring * math.sin(math.pi / max(n_inner, 2)), 0.4 * min(outer.radii))
    phase = rng.uniform(0, 2 * math.pi)
    for k in range(n_inner):
        ang = phase + 2 * math.pi * k / n_inner
        z = outer.center[0] + rng.uniform(-0.15, 0.15) * ring
        centre = (z, outer.center[1] + ring * math.cos(ang), outer.center[2] + ring * math.sin(ang))
        radii = tuple(float(small * rng.uniform(0.75, 0.95)) for _ in range(3))
        shapes.append(Ellipsoid(k + 2, centre, radii))
    return shapes


def paint(shapes: Sequence[Ellipsoid], dims) -> np.ndarray:
    """Paint larger shapes first; any two shapes must be nested or disjoint."""
    masks = [(s, s.mask(dims)) for s in shapes]
    for i, (a, ma) in enumerate(masks):
        for b, mb in masks[i + 1:]:
            inter = np.logical_and(ma, mb).sum()
            if inter and inter != ma.sum() and inter != mb.sum():
                raise ValueError(f"shapes for classes {a.label} and {b.label} overlap without nesting")
    labels = np.zeros(dims, dtype=np.int16)
    for s, m in sorted(masks, key=lambda sm: -int(sm[1].sum())):
        labels[m] = s.label
    return labels


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> List[Tuple[Volume, LabelMap]]:
    spec.validate()
    rng = np.random.default_rng(seed)
    K = spec.n_classes
    table = synthetic_class_table(K)
    means = np.asarray(spec.means if spec.means is not None else np.linspace(0.0, 1.0, K), dtype=np.float64)
    dims = (spec.size,) * 3
    out = []
    for _ in range(spec.count):
        shapes = spec.shapes if spec.shapes is not None else _default_layout(spec, rng)
        labels = paint(shapes, dims)
        noise = rng.normal(0.0, spec.noise_sigma, size=dims) if spec.noise_sigma > 0 else 0.0
        data = (means[labels] + noise).astype(np.float32)
        out.append((Volume(data, "LIA"), LabelMap(labels, table, "LIA")))
    return out
