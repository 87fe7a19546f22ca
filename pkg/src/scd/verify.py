"""Numerical verification: finite-difference gradient checks and the
invariant suites behind ``scd check``.

Everything here runs in 64-bit precision; the suites re-raise nothing and
instead return structured results so the CLI can print one line per check
and exit nonzero if any failed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from scd import tensor as T


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return f"[{status}] {self.name}: measured {self.measured:.3e} vs bound {self.bound:.3e}{extra}"


def finite_difference_check(
    fn: Callable[[Sequence[T.Tensor]], T.Tensor],
    inputs: Sequence[T.Tensor],
    rng: np.random.Generator,
    n_coords: int = 100,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> float:
    """Max relative error between backward() gradients and central differences.

    Coordinates are sampled across all inputs (at least ``n_coords`` total,
    or every coordinate if fewer exist). Coordinates where both the
    analytic and numeric gradient are below ``atol`` count as exact; this
    is the usual guard against 0/0 at the finite-difference noise floor.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise T.TensorError("finite_difference_check requires f64 precision")
        x.zero_grad()
    loss = fn(inputs)
    loss.backward()
    grads = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]

    total = sum(x.size for x in inputs)
    n = min(n_coords, total)
    # sample coordinates proportionally, without replacement inside each input
    flat_choices = rng.choice(total, size=n, replace=False)
    offsets = np.cumsum([0] + [x.size for x in inputs])

    worst = 0.0
    for flat in flat_choices:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[which])
        x = inputs[which]
        orig = x.data.reshape(-1)[idx]
        with T.no_grad():
            x.data.reshape(-1)[idx] = orig + h
            f_plus = fn(inputs).item()
            x.data.reshape(-1)[idx] = orig - h
            f_minus = fn(inputs).item()
        x.data.reshape(-1)[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        an = grads[which].reshape(-1)[idx]
        if abs(fd) < atol and abs(an) < atol:
            continue
        rel = abs(fd - an) / max(abs(fd), abs(an))
        worst = max(worst, rel)
    del rtol
    return worst
