"""Seeded k-means with k-means++ initialization.

Deterministic for a fixed Generator: fixed iteration count, ties resolved
by lowest index, empty clusters re-seeded from the point farthest from
its assigned centroid. All arithmetic in float64.
"""

from __future__ import annotations

import numpy as np


def _pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All points coincide with chosen centroids; fall back to uniform.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    iters: int = 25,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster points into k groups; returns (centroids (k,d), labels (n,)).

    Requires len(points) >= k.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise ValueError(f"k-means needs at least k={k} points, got {n}")
    centroids = _pp_init(points, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        # argmin over squared distances; np.argmin takes the lowest index on ties
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        assigned_d2 = d2[np.arange(n), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(assigned_d2.argmax())
                centroids[j] = points[far]
                labels[far] = j
                assigned_d2[far] = 0.0
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return centroids, labels


def quantization_error(points: np.ndarray, centroids: np.ndarray) -> float:
    """Mean squared distance of each point to its nearest centroid."""
    points = np.asarray(points, dtype=np.float64)
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).mean())
