"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError


def check_nan_matrix(x, allow_empty=False):
    """2-D float array where NaN marks a missing entry; infinities are rejected."""
    try:
        a = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"cannot convert input to a float matrix: {exc}") from exc
    if a.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got {a.ndim} dimension(s)")
    if 0 in a.shape:
        raise InvalidInputError(f"matrix has an empty dimension: {a.shape}")
    if np.isinf(a).any():
        raise InvalidInputError("infinite entries are not allowed; use NaN for missing values")
    if not allow_empty and np.isnan(a).all():
        raise InvalidInputError("no observed entries")
    return a


def check_same_shape(a, b, what="matrix"):
    if np.shape(a) != np.shape(b):
        raise InvalidInputError(f"{what} shape {np.shape(b)} != fitted shape {np.shape(a)}")


def check_pairs(x, n_users=None, n_items=None):
    """``(n, 2)`` integer array of (user, item) indices."""
    a = np.asarray(x)
    if a.ndim != 2 or a.shape[1] != 2:
        raise InvalidInputError(f"expected an (n, 2) array of (user, item) pairs, got shape {a.shape}")
    if a.size and not np.all(np.equal(np.mod(a, 1), 0)):
        raise InvalidInputError("user and item ids must be integers")
    a = a.astype(np.int64)
    if a.size and a.min() < 0:
        raise InvalidInputError("negative user or item id")
    if n_users is not None and a.size and a[:, 0].max() >= n_users:
        raise InvalidInputError("user id outside the fitted range")
    if n_items is not None and a.size and a[:, 1].max() >= n_items:
        raise InvalidInputError("item id outside the fitted range")
    return a


def check_ratings(y, n):
    r = np.asarray(y, dtype=float).ravel()
    if r.size != n:
        raise InvalidInputError(f"{r.size} ratings for {n} pairs")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("ratings must be finite")
    return r
