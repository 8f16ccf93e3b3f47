"""DBSCAN on a precomputed distance matrix; noise points are subgoals."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .reach_metric import ReferenceDistanceMatrix

NOISE = -1
DEFAULT_MIN_PTS = 4
DEFAULT_EPS_QUANTILE = 90.0


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    eps: float
    min_pts: int
    reference: int
    states: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _as_matrix(dist) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(dist, ReferenceDistanceMatrix):
        return dist.d, dist.states, dist.reference
    d = np.asarray(dist, dtype=float)
    return d, np.arange(len(d)), -1


def dbscan(dist: ReferenceDistanceMatrix | np.ndarray, eps: float, min_pts: int = DEFAULT_MIN_PTS) -> ClusterResult:
    """Classical DBSCAN, visiting points in row order.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Border points join the first cluster whose expansion
    reaches them.
    """
    if not eps > 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    d, states, reference = _as_matrix(dist)
    n = len(d)
    within = d <= eps
    np.fill_diagonal(within, True)  # a point always counts itself
    neighbors = [np.flatnonzero(row) for row in within]
    core = np.array([len(nb) >= min_pts for nb in neighbors], dtype=bool)
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    queue.append(q)
        cluster += 1
    return ClusterResult(labels, float(eps), int(min_pts), reference, states)


def default_eps(dist: ReferenceDistanceMatrix | np.ndarray, min_pts: int = DEFAULT_MIN_PTS,
                quantile: float = DEFAULT_EPS_QUANTILE) -> float:
    """k-distance heuristic: the given percentile of each point's distance to
    its ``min_pts``-th nearest point, counting the point itself."""
    d, _, _ = _as_matrix(dist)
    d = d.copy()
    np.fill_diagonal(d, 0.0)
    k = min(min_pts, len(d)) - 1
    kth = np.sort(d, axis=1)[:, k]
    return float(np.percentile(kth, quantile))


def subgoals(result: ClusterResult) -> list[int]:
    return [int(s) for s in result.states[result.labels == NOISE]]
