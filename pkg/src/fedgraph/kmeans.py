"""Small deterministic k-means with k-means++ seeding.

Kept in-tree (rather than an external dependency) so that every clustering
path in the package is bit-reproducible from a single integer seed.
"""

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError


def kmeans_pp_seeds(x, k, rng):
    """k-means++ seed rows: spread initial centers by D^2 sampling."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = cdist(x, centers[:1], "sqeuclidean").ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all remaining points coincide
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, cdist(x, centers[j : j + 1], "sqeuclidean").ravel())
    return centers


def _lloyd(x, centers, max_iter):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        dists = cdist(x, centers, "sqeuclidean")
        new_labels = dists.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # Re-seed an empty cluster at the farthest point.
                far = dists.min(axis=1).argmax()
                centers[j] = x[far]
    dists = cdist(x, centers, "sqeuclidean")
    labels = dists.argmin(axis=1)
    inertia = float(dists[np.arange(len(x)), labels].sum())
    return labels, centers, inertia


def kmeans(points, k, seed, n_init=10, max_iter=100):
    """Best-of-``n_init`` Lloyd runs; returns (labels, centers, inertia)."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise InvalidInputError(f"need at least k={k} samples, got shape {x.shape}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = kmeans_pp_seeds(x, k, rng)
        labels, centers, inertia = _lloyd(x, centers.copy(), max_iter)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return best
