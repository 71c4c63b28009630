"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(
    function: Callable[[Tensor], Tensor],
    point: np.ndarray,
    h: float = 1e-5,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``function`` maps a tensor shaped like ``point`` to a scalar tensor. It is
    evaluated in double precision. ``coords`` restricts the check to a subset
    of coordinates (all of them by default).
    """
    with precision("double"):
        point = np.asarray(point, dtype=np.float64)
        x = Tensor(point, requires_grad=True)
        out = function(x)
        out.backward()
        analytic = x.grad if x.grad is not None else np.zeros_like(point)
        if coords is None:
            coords = np.ndindex(point.shape)
        worst = 0.0
        with no_grad():
            for idx in coords:
                idx = tuple(idx)
                plus = point.copy()
                plus[idx] += h
                minus = point.copy()
                minus[idx] -= h
                numeric = (function(Tensor(plus)).item() - function(Tensor(minus)).item()) / (2 * h)
                worst = max(worst, float(relative_error(np.float64(analytic[idx]), np.float64(numeric))))
    return worst
