"""Deterministic k-medoids partitioning of representation space.

PAM-style: a greedy build phase picks medoids that minimize total distance,
then assignment and medoid-update steps alternate until assignments are
stable (or 100 iterations). Centers are always actual data points, so they
can be handed to a labeling oracle. The seed influences tie-breaks in the
greedy build only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAX_ITERATIONS = 100
DEFAULT_MAX_CLUSTERS = 20


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """(N, N) Euclidean distance matrix. Squared distances clamped at 0."""
    sq = np.sum(points ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def default_cluster_count(n: int) -> int:
    """min(20, max(1, N // 25)) clusters; override via config."""
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    return min(DEFAULT_MAX_CLUSTERS, max(1, n // 25))


@dataclass
class Clustering:
    """Cluster assignments plus the medoid index of each cluster."""

    assignments: np.ndarray
    medoids: np.ndarray
    num_clusters: int
    cost: float
    cost_trajectory: list[float] = field(default_factory=list)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)


def _greedy_build(dist: np.ndarray, num_clusters: int, tie_order: np.ndarray) -> list[int]:
    n = dist.shape[0]
    totals = dist.sum(axis=1)
    best = totals.min()
    candidates = np.flatnonzero(totals == best)
    first = int(candidates[np.argmin(tie_order[candidates])])
    medoids = [first]
    nearest = dist[first].copy()
    for _ in range(1, num_clusters):
        new_costs = np.minimum(dist, nearest[None, :]).sum(axis=1)
        new_costs[medoids] = np.inf
        best = new_costs.min()
        candidates = np.flatnonzero(new_costs == best)
        chosen = int(candidates[np.argmin(tie_order[candidates])])
        medoids.append(chosen)
        np.minimum(nearest, dist[chosen], out=nearest)
    return medoids


def k_medoids(points: np.ndarray, num_clusters: int, seed: int = 0) -> Clustering:
    """Partition the rows of `points` into `num_clusters` clusters.

    Deterministic for a given seed; the total-distance objective is
    non-increasing across iterations (recorded in cost_trajectory).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"points must be an (N, D) matrix, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= num_clusters <= n:
        raise ValidationError(f"cluster count must lie in [1, {n}], got {num_clusters}")

    dist = pairwise_distances(points)
    tie_order = np.random.default_rng(seed).permutation(n)
    medoids = np.array(_greedy_build(dist, num_clusters, tie_order), dtype=np.int64)

    trajectory: list[float] = []
    assignments = np.argmin(dist[:, medoids], axis=1)
    assignments[medoids] = np.arange(num_clusters)  # a medoid stays in its own cluster
    trajectory.append(float(dist[np.arange(n), medoids[assignments]].sum()))

    for _ in range(MAX_ITERATIONS):
        new_medoids = medoids.copy()
        for c in range(num_clusters):
            members = np.flatnonzero(assignments == c)
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids[c] = members[int(np.argmin(within))]
        new_assignments = np.argmin(dist[:, new_medoids], axis=1)
        new_assignments[new_medoids] = np.arange(num_clusters)
        trajectory.append(float(dist[np.arange(n), new_medoids[new_assignments]].sum()))
        changed = not np.array_equal(new_assignments, assignments) \
            or not np.array_equal(new_medoids, medoids)
        medoids, assignments = new_medoids, new_assignments
        if not changed:
            break

    return Clustering(assignments=assignments, medoids=medoids,
                      num_clusters=num_clusters, cost=trajectory[-1],
                      cost_trajectory=trajectory)


def write_clustering(clustering: Clustering, record_ids: np.ndarray,
                     path: str | Path, sidecar_path: str | Path | None = None) -> None:
    """Write `record_id,cluster_index` rows plus a medoid-id sidecar line."""
    lines = ["record_id,cluster_index"]
    for rid, c in zip(record_ids, clustering.assignments):
        lines.append(f"{int(rid)},{int(c)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if sidecar_path is None:
        sidecar_path = str(path) + ".medoids"
    medoid_ids = [int(record_ids[m]) for m in clustering.medoids]
    Path(sidecar_path).write_text(
        "medoid_record_ids = " + ",".join(str(m) for m in medoid_ids) + "\n",
        encoding="utf-8")
