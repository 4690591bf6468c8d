"""Shared test utilities: the finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from xmc.autodiff import Tensor


def finite_diff_grads(f: Callable[[], float], params: list[Tensor],
                      h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of the params.

    ``f`` must re-run the forward pass from the params' current data; it is
    evaluated 2x per parameter element.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over elements of |a - n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def check_grads(f: Callable[[], float], params: list[Tensor],
                tol: float = 1e-4, h: float = 1e-5) -> float:
    """Assert analytic grads (already populated) match finite differences."""
    numeric = finite_diff_grads(f, params, h)
    worst = 0.0
    for p, num in zip(params, numeric):
        assert p.grad is not None, "parameter has no analytic gradient"
        worst = max(worst, relative_error(p.grad, num))
    assert worst < tol, f"gradient mismatch: {worst} >= {tol}"
    return worst
