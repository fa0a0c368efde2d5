"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Perturb ``array`` in place element by element; ``loss_fn`` re-reads it."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn()
        flat[i] = old - h
        fm = loss_fn()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per parameter array between ``grads`` and finite differences.

    ``grads`` must already hold the analytic gradients of ``loss_fn`` at the
    current parameters. Arrays should be float64.
    """
    report = {}
    for name, arr in params.items():
        num = numeric_gradient(loss_fn, arr, h)
        report[name] = float(relative_error(grads[name], num).max())
    return report
