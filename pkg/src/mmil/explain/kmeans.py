"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ITER = 300


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list = field(default_factory=list)  # objective after every assignment step


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences keep the objective free of cancellation error
    out = np.empty((points.shape[0], centroids.shape[0]))
    for c in range(centroids.shape[0]):
        diff = points - centroids[c]
        out[:, c] = np.einsum("ij,ij->i", diff, diff)
    return out


def assign_labels(vectors, centroids) -> np.ndarray:
    """Index of the nearest centroid (Euclidean) for every row; ties go to the smaller index."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    centroids = np.atleast_2d(np.asarray(centroids, dtype=float))
    if vectors.shape[1] != centroids.shape[1]:
        raise ValueError(f"width mismatch: vectors have {vectors.shape[1]} entries, centroids {centroids.shape[1]}")
    return squared_distances(vectors, centroids).argmin(axis=1)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = squared_distances(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, squared_distances(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def _nearest(points, centroids, point_sq):
    """Exact nearest centroid and squared distance for every point.

    Candidates are ranked with the fast ``|x|^2 - 2x.c + |c|^2`` expansion.
    Where the two best candidates are closer than the expansion's rounding
    error, they are re-compared with exact differences (ties to the smaller
    index). The returned distances are always computed exactly.
    """
    n, k = points.shape[0], centroids.shape[0]
    rows = np.arange(n)
    cent_sq = np.einsum("ij,ij->i", centroids, centroids)
    approx = point_sq[:, None] - 2.0 * points @ centroids.T + cent_sq[None, :]
    labels = approx.argmin(axis=1)
    if k > 1:
        two = np.sort(np.argpartition(approx, 1, axis=1)[:, :2], axis=1)
        gap = np.abs(approx[rows, two[:, 0]] - approx[rows, two[:, 1]])
        tol = 1e-9 * (point_sq + cent_sq.max() + 1.0)
        close = np.nonzero(gap <= tol)[0]
        if close.size:
            sub = points[close]
            d0 = sub - centroids[two[close, 0]]
            d1 = sub - centroids[two[close, 1]]
            e0 = np.einsum("ij,ij->i", d0, d0)
            e1 = np.einsum("ij,ij->i", d1, d1)
            labels[close] = np.where(e1 < e0, two[close, 1], two[close, 0])
    diff = points - centroids[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def _lloyd(points, centroids, max_iter):
    centroids = centroids.copy()
    k = centroids.shape[0]
    point_sq = np.einsum("ij,ij->i", points, points)
    history = []
    labels = None
    for it in range(1, max_iter + 1):
        new_labels, dist_own = _nearest(points, centroids, point_sq)
        objective = float(dist_own.sum())
        if history and objective > history[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"k-means objective increased at iteration {it}: {history[-1]} -> {objective}")
        history.append(objective)
        if labels is not None and np.array_equal(new_labels, labels):
            return centroids, labels, objective, it, history
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        onehot = np.zeros((k, len(points)))
        onehot[labels, np.arange(len(points))] = 1.0
        sums = onehot @ points
        for c in range(k):
            if counts[c]:
                centroids[c] = sums[c] / counts[c]
            else:
                far = int(dist_own.argmax())
                centroids[c] = points[far]
                dist_own[far] = 0.0
    labels, dist_own = _nearest(points, centroids, point_sq)
    return centroids, labels, float(dist_own.sum()), max_iter, history


def kmeans_fit(points, k: int, seed=0, *, n_init: int = 1, init=None, max_iter: int = MAX_ITER) -> KMeansResult:
    """Cluster ``points`` into ``k`` groups.

    Each of ``n_init`` runs seeds with k-means++ (or starts from ``init``) and
    iterates Lloyd steps until the assignment stops changing or ``max_iter``
    is reached. The objective is checked to be non-increasing after every
    assignment step. Empty clusters are moved to the point farthest from its
    own centroid. The run with the lowest objective is returned.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if points.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {points.shape[0]}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(n_init)
    best = None
    for ss in seeds:
        rng = np.random.default_rng(ss)
        start = np.asarray(init, dtype=float) if init is not None else kmeans_plusplus(points, k, rng)
        centroids, labels, inertia, n_iter, history = _lloyd(points, start, max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centroids, labels, inertia, n_iter, history)
        if init is not None:
            break
    return best


def objective(points, centroids) -> float:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    return float(squared_distances(points, np.atleast_2d(centroids)).min(axis=1).sum())
