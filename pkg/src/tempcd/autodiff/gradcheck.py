"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, entries=None) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place.

    ``entries`` restricts the work to those flat indices; the rest stay zero.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor] | Dict[str, Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    name: str = "gradcheck",
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckResult:
    """Compare backward() against central differences for every input.

    ``fn`` must rebuild the graph on every call and return a scalar. With
    ``max_entries`` each input is probed at that many randomly chosen entries.
    Gradients smaller than ``floor`` are compared in absolute terms, since
    central differences cannot resolve them below round-off.
    """
    if isinstance(inputs, dict):
        inputs = list(inputs.values())
    if any(x.data.dtype != np.float64 for x in inputs):
        raise TypeError("gradient checks need 64-bit tensors")
    for x in inputs:
        x.zero_grad()
    fn().backward()
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        entries = None
        if max_entries is not None and x.data.size > max_entries:
            entries = np.sort(rng.choice(x.data.size, size=max_entries, replace=False))
        numeric = numerical_gradient(fn, x, h, entries)
        if entries is not None:
            analytic, numeric = analytic.reshape(-1)[entries], numeric.reshape(-1)[entries]
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
        count += analytic.size
        x.zero_grad()
    return GradCheckResult(name, worst, count, tolerance)
