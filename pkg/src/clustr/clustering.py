"""K-means over feature representations, one centroid set per class.

Centroids are fit per class with D^2-sampling initialization plus Lloyd
refinement, best of several restarts by inertia. The shared variance
sigma^2 is the mean squared residual to the assigned centroid over all
instances, normalized by N-1 and clamped below to keep the downstream
loss and soft inference finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clustr.datasets import LabeledDataset
from clustr.errors import InfeasibleError
from clustr.network import DenseNet, forward_batch

SIGMA_SQ_FLOOR = 1e-6


@dataclass
class ClusterModel:
    """Per-class centroid sets plus the global variance estimate.

    centroids[c] has shape (K_c, d). assignments maps each training
    instance to its (class, cluster index) pair; it is transient state
    used by the batch sampler and the loss, and is not serialized.
    """

    centroids: list[np.ndarray]
    sigma_sq: float
    assignments: np.ndarray | None = None  # (N, 2) int: class, cluster

    def __post_init__(self):
        self.centroids = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.centroids]
        if not self.centroids or any(c.shape[0] < 1 for c in self.centroids):
            raise ValueError("every class needs at least one centroid")
        d = self.centroids[0].shape[1]
        if any(c.shape[1] != d for c in self.centroids):
            raise ValueError("centroid dimensions disagree across classes")
        if any(not np.all(np.isfinite(c)) for c in self.centroids):
            raise ValueError("centroids must be finite")
        if self.sigma_sq < SIGMA_SQ_FLOOR:
            raise ValueError(f"sigma_sq must be >= {SIGMA_SQ_FLOOR}")

    @property
    def num_classes(self) -> int:
        return len(self.centroids)

    @property
    def feature_dim(self) -> int:
        return self.centroids[0].shape[1]

    def stacked(self):
        """All centroids as one (T, d) array plus parallel class/cluster ids.

        Rows are ordered by (class, cluster index), which is the tie-break
        order used everywhere downstream.
        """
        stack = np.concatenate(self.centroids, axis=0)
        class_ids = np.concatenate(
            [np.full(c.shape[0], i, dtype=np.int64) for i, c in enumerate(self.centroids)]
        )
        cluster_ids = np.concatenate(
            [np.arange(c.shape[0], dtype=np.int64) for c in self.centroids]
        )
        return stack, class_ids, cluster_ids

    def to_json_dict(self) -> dict:
        return {
            "centroids": [c.tolist() for c in self.centroids],
            "sigma_sq": self.sigma_sq,
            "k_per_class": [int(c.shape[0]) for c in self.centroids],
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "ClusterModel":
        return ClusterModel(
            centroids=[np.array(c) for c in doc["centroids"]],
            sigma_sq=float(doc["sigma_sq"]),
        )


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared euclidean distances, shape (N, K)."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_init(points: np.ndarray, k: int, rng_seed) -> np.ndarray:
    """Pick k starting centroids by D^2 sampling; deterministic per seed.

    The first centroid is uniform over the points, each next one is drawn
    with probability proportional to its squared distance to the nearest
    centroid chosen so far.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_distinct = np.unique(points, axis=0).shape[0]
    if k < 1:
        raise InfeasibleError("k must be >= 1")
    if k > n_distinct:
        raise InfeasibleError(f"k={k} exceeds the number of distinct points ({n_distinct})")
    rng = np.random.default_rng(rng_seed)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(points.shape[0])]
    if k == 1:
        return centroids
    d2 = _sq_dists(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        # total > 0 is guaranteed by the distinct-point precondition
        idx = rng.choice(points.shape[0], p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, _sq_dists(points, centroids[j : j + 1])[:, 0])
    return centroids


def lloyd(points: np.ndarray, init_centroids: np.ndarray, max_iters: int = 100, tol: float = 1e-9):
    """Lloyd refinement: alternate nearest-centroid assignment and means.

    Stops when the largest centroid movement drops below `tol` or after
    `max_iters` rounds. Assignment ties go to the lowest centroid index.
    A cluster that loses all points is re-seeded to the point currently
    farthest from its assigned centroid (each repair consumes a distinct
    point). Returns (centroids, assignment, inertia).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centroids = np.atleast_2d(np.asarray(init_centroids, dtype=np.float64)).copy()
    if centroids.shape[0] < 1:
        raise ValueError("need at least one centroid")
    k = centroids.shape[0]
    assignment = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        assignment = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assignment == j]
            if members.shape[0] > 0:
                new_centroids[j] = members.mean(axis=0)
        # repair empty clusters with the worst-served points
        empties = [j for j in range(k) if not np.any(assignment == j)]
        if empties:
            own_d2 = d2[np.arange(points.shape[0]), assignment].copy()
            for j in empties:
                far = int(np.argmax(own_d2))
                new_centroids[j] = points[far]
                own_d2[far] = -1.0
        movement = np.max(np.linalg.norm(new_centroids - centroids, axis=1))
        centroids = new_centroids
        if movement < tol:
            break
    d2 = _sq_dists(points, centroids)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(points.shape[0]), assignment].sum())
    return centroids, assignment, inertia


def fit_class_clusters(points: np.ndarray, k: int, restarts: int, rng_seed, class_index: int = 0):
    """Best-of-restarts K-means for one class; selection by lowest inertia.

    Restart r uses the derived seed (rng_seed, class_index, r), so the
    whole fit is deterministic and classes could run in parallel.
    """
    best = None
    for r in range(restarts):
        init = kmeans_pp_init(points, k, [rng_seed, class_index, r])
        centroids, assignment, inertia = lloyd(points, init)
        if best is None or inertia < best[2]:
            best = (centroids, assignment, inertia)
    return best


def refresh_clusters(
    net: DenseNet,
    data: LabeledDataset,
    k_per_class: int,
    restarts: int = 10,
    rng_seed=0,
) -> ClusterModel:
    """Recompute per-class centroids and sigma^2 from current features.

    For every class, runs `restarts` seeded D^2-init + Lloyd fits and keeps
    the lowest-inertia one. sigma^2 is the global mean squared residual to
    the assigned centroid with N-1 normalization, clamped to the floor.
    """
    num_classes = data.num_classes
    if num_classes < 1:
        raise InfeasibleError("dataset is empty")
    features = forward_batch(net, data.inputs)
    centroids: list[np.ndarray] = []
    assignments = np.zeros((len(data), 2), dtype=np.int64)
    sq_residual = 0.0
    for c in range(num_classes):
        idx = data.class_indices(c)
        if idx.size < k_per_class:
            raise InfeasibleError(
                f"class {c} has {idx.size} instances, fewer than k_per_class={k_per_class}"
            )
        cents, assign, _ = fit_class_clusters(features[idx], k_per_class, restarts, rng_seed, c)
        centroids.append(cents)
        assignments[idx, 0] = c
        assignments[idx, 1] = assign
        sq_residual += float(np.sum((features[idx] - cents[assign]) ** 2))
    n = len(data)
    sigma_sq = sq_residual / (n - 1) if n > 1 else 0.0
    sigma_sq = max(sigma_sq, SIGMA_SQ_FLOOR)
    return ClusterModel(centroids=centroids, sigma_sq=sigma_sq, assignments=assignments)
