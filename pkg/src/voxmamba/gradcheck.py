"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: Dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, {self.n_checked} entries)"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    # normwise: robust to entries whose true gradient is ~0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               names: Optional[Sequence[str]] = None, max_entries: Optional[int] = None,
               seed: int = 0, analytic: Optional[Sequence[np.ndarray]] = None,
               floor: float = 1e-12) -> GradCheckReport:
    """Compare ``backward`` gradients of the scalar ``f()`` with central differences.

    ``f`` closes over ``inputs`` and is re-evaluated after each in-place
    perturbation.  ``max_entries`` samples that many coordinates per input
    instead of checking all of them.  ``analytic`` overrides the gradients
    taken from ``backward`` (used to test that corrupted gradients are caught).
    ``floor`` bounds the error denominator from below: an input whose
    gradients are all smaller than it is judged by absolute error / floor,
    which keeps finite-difference noise (about eps * |f| / h) on genuinely
    vanishing gradients from reading as a 100% error.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        for t in inputs:
            if t.data.dtype != np.float64:
                raise TypeError("grad_check needs double-precision inputs")
            t.grad = None
        if analytic is None:
            out = f()
            if out.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            out.backward()
            analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        report = GradCheckReport(max_rel_error=0.0, tol=tol)
        for name, t, ga in zip(names, inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                t.bump_version()
                fp = f().item()
                flat[i] = orig - h
                t.bump_version()
                fm = f().item()
                flat[i] = orig
                t.bump_version()
                num[j] = (fp - fm) / (2 * h)
            err = _rel_error(np.asarray(ga).reshape(-1)[idx], num, floor)
            report.per_input[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
            report.n_checked += idx.size
    return report
