"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failures: Dict[str, float] = field(default_factory=dict)
    per_input: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}); "
            f"checked {len(self.checked)}, skipped {len(self.skipped)}"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-7,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the current contents of ``inputs`` on
    every call. Inputs with ``requires_grad=False`` are reported as skipped.
    """
    names = list(names) if names is not None else [t.name or f"input{i}" for i, t in enumerate(inputs)]
    for t in inputs:
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, t in zip(names, inputs):
        if not t.requires_grad:
            report.skipped.append(name)
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
        err = float(relative_error(analytic, numeric, floor).max()) if t.data.size else 0.0
        report.checked.append(name)
        report.per_input[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
        if err > tol:
            report.failures[name] = err
    return report
