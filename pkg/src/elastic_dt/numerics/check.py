"""Gradient extraction and central-finite-difference verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import Tensor
from .params import ParamStore

LossFn = Callable[[ParamStore], Tensor]


def reverse_gradient(loss_fn: LossFn, params: ParamStore) -> dict[str, np.ndarray]:
    """Evaluate the scalar loss and return one gradient array per parameter."""
    params.zero_grads()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    loss.backward()
    out = {}
    for name, t in params.items():
        out[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    params.zero_grads()
    return out


@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]

    def summary(self) -> str:
        lines = [f"finite-diff check (h={self.h:g}, tol={self.tol:g})"]
        for name, err in sorted(self.max_rel_err.items(), key=lambda kv: -kv[1]):
            mark = "ok  " if err <= self.tol else "FAIL"
            lines.append(f"  {mark} {name}: max rel err {err:.3e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def finite_diff_check(
    loss_fn: LossFn,
    params: ParamStore,
    h: float = 1e-4,
    tol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare the reverse-mode gradient against central differences.

    Perturbs every coordinate of every parameter, so only sensible for small
    verification models.  Requires float64 parameters; float32 rounding would
    swamp the tolerance.
    """
    if params.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 ParamStore")
    if analytic is None:
        analytic = reverse_gradient(loss_fn, params)
    report = GradCheckReport(tol=tol, h=h)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params).data)
            flat[i] = orig - h
            down = float(loss_fn(params).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(a[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(a[i] - numeric) / denom)
        report.max_rel_err[name] = worst
        if worst > tol:
            report.passed = False
    return report
