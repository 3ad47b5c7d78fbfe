"""Overlap and surface metrics, per-class reports and the Wilcoxon signed-rank test."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import ndtr
from scipy.stats import rankdata

from .volumes import CompatibilityError, LabelMap

_FACE = ndimage.generate_binary_structure(3, 1)


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. ASSD of an empty mask)."""


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def volume_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one face neighbour outside it (the border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def _surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    # distance from every voxel to the nearest dst-surface voxel, read at src-surface voxels
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def assd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetric("ASSD is undefined when either mask is empty")
    sa, sb = surface(a), surface(b)
    d_ab = _surface_distances(sa, sb, spacing)
    d_ba = _surface_distances(sb, sa, spacing)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def assd_bruteforce(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """All-pairs reference implementation, for small masks."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetric("ASSD is undefined when either mask is empty")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(a)) * sp
    pb = np.argwhere(surface(b)) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(pa) + len(pb)))


# -- reports ----------------------------------------------------------------------

@dataclass
class ClassMetrics:
    index: int
    label_id: int
    name: str
    dsc: float
    vs: float
    assd: Optional[float]
    in_pred: bool
    in_truth: bool


@dataclass
class MetricsReport:
    per_class: List[ClassMetrics]
    means: Dict[str, Optional[float]]
    missing: Dict[int, str] = field(default_factory=dict)  # index -> "prediction" | "truth"

    def to_json(self) -> dict:
        return {"per_class": [vars(c) for c in self.per_class], "means": self.means,
                "missing": {str(k): v for k, v in self.missing.items()}}

    def write_csv(self, path: str) -> None:
        write_reports_csv(path, [("", self)])

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)


def write_reports_csv(path: str, reports: Sequence) -> None:
    """One row per (subject, class); an undefined ASSD leaves its cell empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "index", "label_id", "name", "dsc", "vs", "assd"])
        for subject, report in reports:
            for c in report.per_class:
                w.writerow([subject, c.index, c.label_id, c.name, repr(c.dsc), repr(c.vs),
                            "" if c.assd is None else repr(c.assd)])


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate_pair(pred: LabelMap, truth: LabelMap, classes: Optional[Sequence[int]] = None,
                  include_background: bool = False, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    """Per-class DSC / VS / ASSD.

    Means run over classes present in either map (both-empty classes would
    score a vacuous 1); ASSD means only over classes present in both.
    """
    if pred.dims != truth.dims:
        raise CompatibilityError(f"label map shapes differ: {pred.dims} vs {truth.dims}")
    if pred.class_table != truth.class_table:
        raise CompatibilityError("prediction and truth use different class tables")
    table = truth.class_table
    if classes is None:
        classes = [e.index for e in table.entries if include_background or e.role != "background"]
    rows, missing = [], {}
    for k in classes:
        e = table.entries[k]
        a, b = pred.indices == k, truth.indices == k
        ina, inb = bool(a.any()), bool(b.any())
        value = assd(a, b, spacing) if ina and inb else None
        if ina != inb:
            missing[k] = "prediction" if inb else "truth"
        rows.append(ClassMetrics(k, e.label_id, e.name, dsc(a, b), volume_similarity(a, b), value, ina, inb))
    present = [c for c in rows if c.in_pred or c.in_truth]
    means = {"dsc": _mean(c.dsc for c in present), "vs": _mean(c.vs for c in present),
             "assd": _mean(c.assd for c in present)}
    return MetricsReport(rows, means, missing)


def summarize(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """Subject-level mean and standard deviation of the per-subject class means."""
    out = {}
    for key in ("dsc", "vs", "assd"):
        vals = [r.means[key] for r in reports if r.means[key] is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None}
    return out


# -- Wilcoxon signed-rank ---------------------------------------------------------

EXACT_MAX_N = 20


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    p_two_sided: float
    n_effective: int
    method: str


def _signed_ranks(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise UndefinedMetric("all paired differences are zero; the test is undefined")
    # average ranks of |d|; doubled so that tied (half-integer) ranks stay integral
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    return d, ranks2


def _exact_cdf(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ <= w) under the null, by counting sign patterns (DP over doubled ranks)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return float(sum(counts[:w2 + 1])) / float(2 ** len(ranks2))


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    if len(x) != len(y) or len(x) < 1:
        raise ValueError("need two paired samples of equal, non-zero length")
    d, ranks2 = _signed_ranks(x, y)
    n = int(d.size)
    wp2 = int(ranks2[d > 0].sum())
    wm2 = int(ranks2[d < 0].sum())
    w2 = min(wp2, wm2)
    W = w2 / 2.0
    if n <= EXACT_MAX_N:
        p = min(1.0, 2.0 * _exact_cdf(ranks2, w2))
        return WilcoxonResult(W, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks2, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    z = (W - mean + 0.5) / math.sqrt(var) if var > 0 else 0.0
    p = min(1.0, 2.0 * float(ndtr(min(z, 0.0))))
    return WilcoxonResult(W, p, n, "normal")


def wilcoxon_enumerate(x, y) -> float:
    """Two-sided exact p by listing all 2^n sign patterns (reference for small n)."""
    d, ranks2 = _signed_ranks(x, y)
    w2 = min(int(ranks2[d > 0].sum()), int(ranks2[d < 0].sum()))
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(ranks2))
               if int(np.dot(signs, ranks2)) <= w2)
    return min(1.0, 2.0 * hits / 2 ** len(ranks2))
