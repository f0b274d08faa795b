"""Central finite differences for checking analytic gradients."""

import numpy as np


def central_difference(func, x, eps=1e-5, indices=None):
    """Numerical gradient of scalar ``func`` at ``x`` (any shape).

    ``indices`` restricts evaluation to a subset of flat positions; other
    entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for j in positions:
        old = flat[j]
        flat[j] = old + eps
        fp = func(x)
        flat[j] = old - eps
        fm = func(x)
        flat[j] = old
        grad[j] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)`` over the whole gradient (2-norms)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
