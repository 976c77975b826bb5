"""Input validation helpers shared by the data types and estimators."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def check_points(points, *, min_channels: int = 3, name: str = "points") -> np.ndarray:
    """Validate an M x f point matrix and return it as float32.

    Requires a 2-D array with at least ``min_channels`` columns, at least one
    row, and all entries finite.
    """
    arr = np.asarray(points, dtype=np.float32)
    if arr.ndim != 2:
        raise InputError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise InputError(f"{name} must contain at least one point")
    if arr.shape[1] < min_channels:
        raise InputError(
            f"{name} needs >= {min_channels} channels (xyz first), got {arr.shape[1]}"
        )
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite entries")
    return arr


def check_labels(labels, n_points: int, *, max_label: int | None = None) -> np.ndarray:
    """Validate a per-point integer label vector of the expected length."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise InputError(f"labels must be 1-D, got shape {arr.shape}")
    if arr.shape[0] != n_points:
        raise InputError(f"expected {n_points} labels, got {arr.shape[0]}")
    if not np.issubdtype(arr.dtype, np.integer):
        cast = arr.astype(np.int32)
        if not np.array_equal(cast, arr):
            raise InputError("labels must be integers")
        arr = cast
    if arr.min(initial=0) < 0:
        raise InputError("labels must be non-negative")
    if max_label is not None and arr.max(initial=0) > max_label:
        raise InputError(f"labels must be <= {max_label}, found {int(arr.max())}")
    return arr.astype(np.int32)


def check_in_range(value, lo, hi, name: str, *, lo_open: bool = False, hi_open: bool = False):
    """Range check for scalar hyperparameters with readable error text."""
    bad_lo = value <= lo if lo_open else value < lo
    bad_hi = value >= hi if hi_open else value > hi
    if bad_lo or bad_hi:
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise InputError(f"{name}={value!r} outside {lo_b}{lo}, {hi}{hi_b}")
    return value


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise InputError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def readonly(arr: np.ndarray) -> np.ndarray:
    """Return ``arr`` flagged read-only so shared data types stay immutable."""
    arr.setflags(write=False)
    return arr
