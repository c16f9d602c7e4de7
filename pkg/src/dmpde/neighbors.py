"""Exact k-nearest-neighbor tables in ambient space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError


@dataclass(frozen=True)
class NeighborTable:
    indices: np.ndarray  # (N, k) int64
    squared_distances: np.ndarray  # (N, k)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _points(cloud_or_points) -> np.ndarray:
    pts = getattr(cloud_or_points, "points", cloud_or_points)
    return np.ascontiguousarray(pts, dtype=float)


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise ||x_i - y_i||^2 computed from coordinate differences."""
    diff = x - y
    return np.einsum("...j,...j->...", diff, diff)


def knn(cloud, k: int, queries=None) -> NeighborTable:
    """k nearest neighbors of every point, self excluded, ties broken by index.

    With ``queries`` given, neighbors are searched in ``cloud`` for each query
    point and nothing is excluded.
    """
    pts = _points(cloud)
    n = pts.shape[0]
    exclude_self = queries is None
    q = pts if exclude_self else _points(queries)
    available = n - 1 if exclude_self else n
    if not 1 <= k <= available:
        raise ConfigError(f"k={k} outside [1, {available}] for {n} points")

    tree = cKDTree(pts)
    extra = 1 if exclude_self else 0
    m = min(n, k + extra + 8)
    while True:
        _, cand = tree.query(q, k=m)
        cand = cand.reshape(len(q), m)
        d2 = squared_distances(q[:, None, :], pts[cand])
        if exclude_self:
            d2 = np.where(cand == np.arange(len(q))[:, None], np.inf, d2)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        # a tie straddling the last candidate could hide a lower-index neighbor
        if m == n or np.all(d2[:, k - 1] < d2[:, m - 1 - extra]):
            break
        m = min(n, 2 * m)
    return NeighborTable(cand[:, :k].astype(np.int64), d2[:, :k])


def knn_bruteforce(cloud, k: int) -> NeighborTable:
    """All-pairs O(N^2) reference implementation of :func:`knn`."""
    pts = _points(cloud)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k={k} outside [1, {n - 1}]")
    d2 = squared_distances(pts[:, None, :], pts[None, :, :])
    np.fill_diagonal(d2, np.inf)
    idx = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((idx, d2), axis=-1)[:, :k]
    return NeighborTable(order.astype(np.int64), np.take_along_axis(d2, order, axis=1))
