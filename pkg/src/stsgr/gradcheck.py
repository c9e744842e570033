"""Central-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error < self.tol

    def lines(self) -> list[str]:
        return [f"{name:40s} n={self.checked[name]:5d} rel_err={err:.3e}" for name, err in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max-norm relative error ||a - n||_inf / max(||a||_inf, ||n||_inf, floor)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``max_entries`` caps how many coordinates per parameter are perturbed; the
    subset is drawn with a fixed seed so the report is reproducible.
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        p.grad = None
    f().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                plus = f().item()
                flat[i] = orig - h
                minus = f().item()
                flat[i] = orig
                numeric[n] = (plus - minus) / (2.0 * h)
            report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
            report.checked[name] = int(idx.size)
    return report
