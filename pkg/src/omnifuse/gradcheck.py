"""Central finite-difference audit of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    entries: int
    analytic_norm: float

    @property
    def passed(self) -> bool:
        return self.rel_error < DEFAULT_TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; both norms below ``floor`` counts as agreement."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, flat_indices,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.empty(len(flat_indices))
    with no_grad():
        for k, i in enumerate(flat_indices):
            saved = flat[i]
            flat[i] = saved + step
            up = loss_fn().item()
            flat[i] = saved - step
            down = loss_fn().item()
            flat[i] = saved
            out[k] = (up - down) / (2.0 * step)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    max_entries: int | None = 24,
    seed: int = 0,
    corrupt: bool = False,
) -> list[GradCheckResult]:
    """Compare backprop against central differences for each named tensor.

    At most ``max_entries`` randomly chosen entries per tensor are probed.
    ``corrupt`` scales the analytic gradients (negative-control hook).
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    results = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        n = p.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        numeric = numerical_gradient(loss_fn, p, idx, step)
        a = analytic.reshape(-1)[idx]
        results.append(GradCheckResult(name, relative_error(a, numeric), len(idx),
                                       float(np.linalg.norm(a))))
    return results
