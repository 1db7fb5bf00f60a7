"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def central_diff(f, x, eps=1e-5):
    """d f / d x by central differences; ``f`` maps an array like ``x`` to a float."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    """Largest absolute deviation scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
