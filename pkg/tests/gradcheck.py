"""Central finite-difference gradient checks shared by the test modules."""

import numpy as np

from navloop.autonn import backward


def numeric_grad(loss_fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d loss_fn() / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        plus = loss_fn().item()
        array[idx] = old - h
        minus = loss_fn().item()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def max_param_error(loss_fn, paramset) -> float:
    paramset.zero_grad()
    grads = backward(loss_fn(), [paramset])
    worst = 0.0
    for key, t in paramset.tensors.items():
        fd = numeric_grad(loss_fn, t.data)
        worst = max(worst, relative_error(grads[paramset.qualified(key)], fd))
    return worst
