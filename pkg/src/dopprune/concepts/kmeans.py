"""Lloyd's k-means with k-means++ seeding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: tuple[float, ...]
    iterations: int

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def cluster_segments(activations: np.ndarray, k: int, seed, max_iter: int = 100,
                     tol: float = 1e-6) -> KMeansResult:
    """Euclidean k-means over activation rows.

    ``sse_history`` holds the within-cluster sum of squares after every
    assignment step; it never increases.
    """
    x = np.asarray(activations, dtype=np.float64)
    if k < 1:
        raise ValueError("K must be at least 1")
    if len(x) < k:
        raise ValueError(f"{len(x)} rows cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    sse = float(d[np.arange(len(x)), labels].sum())
    history.append(sse)
    return KMeansResult(labels, centroids, tuple(history), it)
