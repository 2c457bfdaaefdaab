"""Coarse-grained semantic targets: cluster each level's codebook.

The clusters are computed once on the frozen tokenizer codebooks and stay
fixed during sequence-model training; thinking tokens are supervised against
the centroid of the cluster containing the target's code at that level.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import load_item_embeddings, write_embeddings
from .kmeans import kmeans


@dataclass
class CentroidSet:
    """Per level: centroid matrix (n_clusters x dim) and code -> cluster map."""

    centroids: list[np.ndarray]
    assignments: list[np.ndarray]

    @property
    def levels(self) -> int:
        return len(self.centroids)

    @property
    def n_clusters(self) -> int:
        return self.centroids[0].shape[0]

    def cluster_of(self, level: int, code: int) -> int:
        return int(self.assignments[level][code])

    def centroid_tensors(self, dtype=torch.float32) -> list[torch.Tensor]:
        return [torch.as_tensor(c, dtype=dtype) for c in self.centroids]


def cluster_codebook(codebook: np.ndarray, n_clusters: int, seed: int,
                     max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ over one level's codewords -> (centroids, assignment)."""
    if n_clusters > codebook.shape[0]:
        raise ValueError(f"n_clusters={n_clusters} exceeds codebook size {codebook.shape[0]}")
    centers, labels, _ = kmeans(codebook, n_clusters, seed=seed, max_iter=max_iter, tol=tol)
    return centers, labels


def build_centroid_set(codebooks: list[np.ndarray], n_clusters: int, seed: int) -> CentroidSet:
    """Cluster every level; level l uses seed + l so levels stay decoupled."""
    centroids = []
    assignments = []
    for level, cb in enumerate(codebooks):
        c, a = cluster_codebook(cb, n_clusters, seed=seed + level)
        centroids.append(c)
        assignments.append(a)
    return CentroidSet(centroids, assignments)


def code_to_centroid(cset: CentroidSet, level: int, code: int) -> np.ndarray:
    if not 0 <= level < cset.levels:
        raise IndexError(f"level {level} out of range for {cset.levels} levels")
    assignment = cset.assignments[level]
    if not 0 <= code < len(assignment):
        raise IndexError(f"code {code} out of range for {len(assignment)} codes")
    return cset.centroids[level][assignment[code]]


def write_centroid_set(directory: str | Path, cset: CentroidSet) -> None:
    """Cluster map as TSV `level \\t code \\t cluster`; centroids per level in EMB1."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cluster_map.tsv", "w", encoding="utf-8") as fh:
        for level, assignment in enumerate(cset.assignments):
            for code, cluster in enumerate(assignment.tolist()):
                fh.write(f"{level}\t{code}\t{cluster}\n")
    for level, centroids in enumerate(cset.centroids):
        write_embeddings(directory / f"centroids_l{level}.emb", centroids)


def load_centroid_set(directory: str | Path) -> CentroidSet:
    directory = Path(directory)
    per_level: dict[int, dict[int, int]] = {}
    with open(directory / "cluster_map.tsv", encoding="utf-8") as fh:
        for line in fh:
            level, code, cluster = (int(x) for x in line.rstrip("\n").split("\t"))
            per_level.setdefault(level, {})[code] = cluster
    assignments = []
    centroids = []
    for level in sorted(per_level):
        codes = per_level[level]
        assignments.append(np.asarray([codes[c] for c in range(len(codes))], dtype=np.int64))
        centroids.append(load_item_embeddings(directory / f"centroids_l{level}.emb").X.astype(np.float64))
    return CentroidSet(centroids, assignments)
