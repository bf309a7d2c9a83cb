"""Input validation helpers.

Small, estimator-friendly checks used at public API boundaries. They
normalize inputs to float64 ndarrays and raise ``ValueError`` with the
offending argument named, so failures point at the caller's data rather
than at a downstream linear-algebra routine.
"""

from __future__ import annotations

import numpy as np


def as_vector(x, name: str = "x", *, allow_empty: bool = False) -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_positive(value, name: str = "value") -> float:
    """Return ``value`` as a strictly positive finite float."""
    v = float(value)
    if not np.isfinite(v) or v <= 0.0:
        raise ValueError(f"{name} must be a positive finite scalar, got {value!r}")
    return v


def check_nonnegative(value, name: str = "value") -> float:
    """Return ``value`` as a nonnegative finite float."""
    v = float(value)
    if not np.isfinite(v) or v < 0.0:
        raise ValueError(f"{name} must be a nonnegative finite scalar, got {value!r}")
    return v


def check_count(value, name: str = "value", *, minimum: int = 1) -> int:
    """Return ``value`` as an integer at least ``minimum``."""
    v = int(value)
    if v != value or v < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return v


def check_in_open_unit_interval(value, name: str = "value") -> float:
    """Return ``value`` as a float strictly inside (0, 1)."""
    v = float(value)
    if not (0.0 < v < 1.0):
        raise ValueError(f"{name} must lie strictly inside (0, 1), got {value!r}")
    return v


def check_box(box, name: str = "box") -> np.ndarray:
    """Return per-coordinate bounds as a (q, 2) array with lower < upper."""
    arr = np.asarray(box, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (q, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite bounds")
    if not np.all(arr[:, 0] < arr[:, 1]):
        raise ValueError(f"{name} must satisfy lower < upper in every coordinate")
    return arr
