"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError
from .engine import Tape, Tensor


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_err: float
    per_input: list[float] = field(default_factory=list)
    h: float = 1e-6
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, h {self.h:.1e})"
        )


def _scaled_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(f, inputs, h: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function with central differences.

    ``f`` takes the given tensors and returns a scalar Tensor; it must be pure
    (re-runnable) in the sense that repeated calls with the same values give
    the same result. The relative error uses a unit floor so near-zero
    gradient coordinates are compared absolutely.
    """
    h = float(h)
    if not 1e-8 <= h <= 1e-4:
        raise ParameterError(f"grad_check: h must lie in [1e-8, 1e-4], got {h}")
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("grad_check inputs must be Tensors")
        t.grad = None

    with Tape() as tape:
        out = f(*inputs)
        tape.backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs
    ]
    for t in inputs:
        t.grad = None

    per_input: list[float] = []
    worst = 0.0
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        worst_here = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = f(*inputs).item()
            flat[j] = orig - h
            f_minus = f(*inputs).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _scaled_error(float(analytic[idx].reshape(-1)[j]), numeric)
            worst_here = max(worst_here, err)
        per_input.append(worst_here)
        worst = max(worst, worst_here)
    return GradCheckReport(max_rel_err=worst, per_input=per_input, h=h, tol=tol)
