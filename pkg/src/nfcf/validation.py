"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_pairs(X, n_users: int | None = None, n_items: int | None = None) -> np.ndarray:
    """Coerce to an (n, 2) int64 array of non-negative (user, item) indices."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ContractError(f"expected an (n, 2) array of (user, item) pairs, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise ContractError("pair indices must be integers")
    X = X.astype(np.int64)
    if X.size and X.min() < 0:
        raise ContractError("pair indices must be non-negative")
    if n_users is not None and X.size and X[:, 0].max() >= n_users:
        raise ContractError(f"user index {X[:, 0].max()} out of range for n_users={n_users}")
    if n_items is not None and X.size and X[:, 1].max() >= n_items:
        raise ContractError(f"item index {X[:, 1].max()} out of range for n_items={n_items}")
    return X


def check_embeddings(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"expected a 2-d embedding matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ContractError("embedding matrix contains non-finite values")
    return X


def check_genders(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype="<U1")
    if y.shape != (n,):
        raise ContractError(f"expected {n} gender labels, got shape {y.shape}")
    return y
