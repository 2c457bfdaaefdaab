"""Seeded k-means++ with a pinned deterministic contract.

Implemented in-repo rather than via sklearn so that init, iteration cap,
tie-breaking, and empty-cluster handling are bit-reproducible under a seed
and the per-iteration objective is exposed for monotonicity checks.
"""

from __future__ import annotations

import numpy as np


def kmeans_plusplus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[i] = X[rng.integers(n)]
            continue
        probs = closest / total
        centers[i] = X[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(
    X: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations from a k-means++ init.

    Returns (centers, labels, objective_per_iteration). Centers are exactly
    the means of their members under the returned labels; empty clusters are
    reseeded with the point farthest from its assigned center. Ties in
    assignment go to the lowest cluster index.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus_init(X, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    objective: list[float] = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), labels]
        objective.append(float(point_d2.sum()))
        for c in range(k):
            if not (labels == c).any():
                far = int(point_d2.argmax())
                labels[far] = c
                point_d2[far] = 0.0
        new_centers = np.empty_like(centers)
        for c in range(k):
            new_centers[c] = X[labels == c].mean(axis=0)
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    return centers, labels, objective
