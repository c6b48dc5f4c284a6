"""Central-difference gradient oracle for the hand-derived backward passes."""
from typing import Callable

import numpy as np


def numerical_gradient(func: Callable[[np.ndarray], float], x, delta: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    grad_i = ( f(x + delta e_i) - f(x - delta e_i) ) / (2 delta)
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + delta
        upper = func(x)
        x.flat[i] = original - delta
        lower = func(x)
        x.flat[i] = original
        grad.flat[i] = (upper - lower) / (2.0 * delta)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a|| + ||n||, floor); 0 when both gradients vanish."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(scale, floor))


def check_gradient(func: Callable[[np.ndarray], float], x, analytic,
                   tolerance: float = 1e-4, delta: float = 1e-5):
    """
    Compare an analytic gradient with the numeric one.

    returns: bool, relative error
    """
    error = relative_error(analytic, numerical_gradient(func, x, delta))
    return error <= tolerance, error
