"""Central finite differences for checking the hand-written backward passes."""
from __future__ import annotations

import numpy as np


def numerical_gradient(f, x, h=1e-5):
    """d f / d x by central differences; ``f`` returns a scalar, ``x`` is perturbed in place."""
    x = np.asarray(x)
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-relative error ||a - n|| / max(||a|| + ||n||, floor)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def projected_loss(out, weights):
    """Scalar probe sum(out * weights); its gradient w.r.t. ``out`` is ``weights``."""
    return float(np.sum(out * weights))
