"""Input validation helpers shared by the estimators and free functions."""

import numpy as np
from sklearn.utils.validation import check_array


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


def check_points(X, name="points", n_rows=None):
    """Return ``X`` as a float64 ``(n, 3)`` array, validating shape and finiteness."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=1,
                        input_name=name)
    except ValueError as exc:
        raise ContractError(f"{name}: {exc}") from None
    if X.shape[1] != 3:
        raise ContractError(f"{name}: expected 3 columns, got {X.shape[1]}")
    if n_rows is not None and X.shape[0] != n_rows:
        raise ContractError(f"{name}: expected {n_rows} rows, got {X.shape[0]}")
    return X


def check_weights(W, n_vertices=None, atol=1e-6):
    """Validate a row-stochastic skinning matrix and return it as float64."""
    try:
        W = check_array(W, dtype=np.float64, ensure_2d=True, input_name="weights")
    except ValueError as exc:
        raise ContractError(f"weights: {exc}") from None
    if n_vertices is not None and W.shape[0] != n_vertices:
        raise ContractError(
            f"weights: expected {n_vertices} rows (vertices), got {W.shape[0]}")
    if W.min() < -atol or W.max() > 1 + atol:
        raise ContractError("weights: entries must lie in [0, 1]")
    row_sums = W.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > atol)
    if bad.size:
        raise ContractError(
            f"weights: row {bad[0]} sums to {row_sums[bad[0]]:.8f}, expected 1")
    return W


def check_shape(a, shape, name):
    """Check ``a`` against ``shape`` where ``None`` entries match anything."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, a.shape)):
        raise ContractError(f"{name}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name}: contains non-finite values")
    return a


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed`` (int, None or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
