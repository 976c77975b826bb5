"""Exact k-nearest-neighbour and farthest-point-sampling kernels.

Both kernels are deterministic with ties broken by lower point index, so
tests can compare them to brute-force references exactly rather than within
a tolerance. They operate on plain coordinate matrices; cloud-facing callers
pass ``cloud.xyz``. Pure functions, safe to run in parallel across clouds.
"""

from __future__ import annotations

import numpy as np

from .data import PointCloud
from .errors import InputError


def _coords(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        points = points.xyz
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise InputError(f"expected an M x d coordinate matrix, got shape {arr.shape}")
    return arr


def pairwise_sq_dists(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn(points, k: int) -> np.ndarray:
    """Indices of the k nearest neighbours of every point, self excluded.

    Returns an M x k integer matrix; row i is sorted by nondecreasing
    distance to point i, ties broken by lower index.
    """
    coords = _coords(points)
    m = coords.shape[0]
    if not 1 <= k <= m - 1:
        raise InputError(f"k={k} must satisfy 1 <= k <= M-1 (M={m})")
    d2 = pairwise_sq_dists(coords)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")  # stable => lower index wins ties
    return order[:, :k].astype(np.int64)


def fps(points, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling starting from ``start``.

    Each pick maximizes the minimum distance to the already-selected set;
    ties broken by lower index. Returns a length-``count`` index vector.
    """
    coords = _coords(points)
    m = coords.shape[0]
    if not 1 <= count <= m:
        raise InputError(f"count={count} must satisfy 1 <= count <= M (M={m})")
    if not 0 <= start < m:
        raise InputError(f"start={start} out of range [0, {m})")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    diff = coords - coords[start]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        selected[i] = nxt
        diff = coords - coords[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    return selected


def fps_count(n_points: int, ratio: float) -> int:
    """Keypoint count for a sampling ratio: max(1, half-up round of ratio*M)."""
    if not 0.0 < ratio <= 1.0:
        raise InputError(f"ratio={ratio} outside (0, 1]")
    return max(1, int(np.floor(ratio * n_points + 0.5)))


def fps_ratio(points, ratio: float, start: int = 0) -> np.ndarray:
    """FPS with the keypoint count derived from a ratio of the cloud size."""
    coords = _coords(points)
    return fps(coords, fps_count(coords.shape[0], ratio), start)
