"""Central-difference gradient oracle.

Gradients in this package are derived by hand; every gradient-bearing test
checks them against this oracle, which must stay independent of the
analytic code paths it verifies.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Entrywise central differences (f(x+h*e) - f(x-h*e)) / 2h.

    `f` takes an array shaped like `x` and returns a scalar. `x` itself is
    never mutated.
    """
    if not h > 0:
        raise NumericError(f"step size must be > 0, got {h}")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function returned a non-finite value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative error.

    Entries whose absolute difference is at or below `floor` count as exact:
    central differences cannot resolve gradients beneath their own
    cancellation noise, which sits near eps * |f| / h.
    """
    diff = np.abs(np.asarray(analytic) - np.asarray(numeric))
    mask = diff > floor
    if not np.any(mask):
        return 0.0
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    return float(np.max(diff[mask] / denom[mask]))
