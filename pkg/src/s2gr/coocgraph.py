"""Item co-occurrence graph and behavior-aligned embedding smoothing.

Edges count, per user, every unordered item pair that falls within a sliding
size window of the chronological sequence. Embeddings are smoothed by
personalized propagation over the symmetrically normalized adjacency and an
exponentially weighted fusion of the hop outputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass
class CoocGraph:
    adjacency: sp.csr_matrix  # symmetric, zero diagonal, nonnegative counts
    window: int

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class PropagationConfig:
    alpha: float = 0.15
    hops: int = 3

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"propagation alpha must lie in (0, 1], got {self.alpha}")
        if self.hops < 0:
            raise ValueError(f"propagation hops must be >= 0, got {self.hops}")


def build_cooc_graph(sequences, n_items: int | None = None, window: int = 5) -> CoocGraph:
    """Count co-occurrences of item pairs within `window` consecutive positions.

    Accepts an InteractionLog or a {user: [items]} dict (the latter lets the
    caller restrict to train prefixes). Each position pair (i, j) with
    0 < j - i < window contributes 1 to the unordered edge weight; self-pairs
    are ignored. Summation over users makes the result order-invariant.
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    if hasattr(sequences, "sequences"):
        n_items = sequences.n_items if n_items is None else n_items
        sequences = sequences.sequences()
    if n_items is None:
        raise ValueError("n_items is required when passing raw sequences")
    counts: Counter[tuple[int, int]] = Counter()
    for _, seq in sorted(sequences.items()):
        for i in range(len(seq)):
            for j in range(i + 1, min(i + window, len(seq))):
                a, b = seq[i], seq[j]
                if a == b:
                    continue
                counts[(a, b) if a < b else (b, a)] += 1
    if counts:
        keys = sorted(counts)
        rows = np.fromiter((k[0] for k in keys), dtype=np.int64, count=len(keys))
        cols = np.fromiter((k[1] for k in keys), dtype=np.int64, count=len(keys))
        vals = np.fromiter((counts[k] for k in keys), dtype=np.float64, count=len(keys))
        upper = sp.coo_matrix((vals, (rows, cols)), shape=(n_items, n_items))
        adjacency = (upper + upper.T).tocsr()
    else:
        adjacency = sp.csr_matrix((n_items, n_items))
    return CoocGraph(adjacency, window)


def normalize_adjacency(graph: CoocGraph) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2}; isolated nodes keep all-zero rows."""
    a = graph.adjacency
    degrees = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degrees)
    nz = degrees > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(degrees[nz])
    d = sp.diags(inv_sqrt)
    return (d @ a @ d).tocsr()


def propagate(X: np.ndarray, a_hat: sp.csr_matrix, cfg: PropagationConfig) -> list[np.ndarray]:
    """Hop outputs [H^(0) .. H^(hops)] of H^(k) = (1-alpha) A_hat H^(k-1) + alpha X."""
    cfg.validate()
    if a_hat.shape[0] != X.shape[0]:
        raise ValueError(f"adjacency size {a_hat.shape[0]} != embedding rows {X.shape[0]}")
    X = np.asarray(X, dtype=np.float64)
    hs = [X]
    for _ in range(cfg.hops):
        hs.append((1.0 - cfg.alpha) * (a_hat @ hs[-1]) + cfg.alpha * X)
    return hs


def fusion_weights(alpha: float, hops: int) -> np.ndarray:
    """Normalized exponential weights alpha(1-alpha)^k / sum_i alpha(1-alpha)^i."""
    raw = alpha * (1.0 - alpha) ** np.arange(hops + 1, dtype=np.float64)
    return raw / raw.sum()


def fuse(h_list: list[np.ndarray], cfg: PropagationConfig) -> np.ndarray:
    """Exponentially weighted combination of hop outputs (float32 result)."""
    cfg.validate()
    if len(h_list) != cfg.hops + 1:
        raise ValueError(f"expected {cfg.hops + 1} hop matrices, got {len(h_list)}")
    betas = fusion_weights(cfg.alpha, cfg.hops)
    out = np.zeros_like(np.asarray(h_list[0], dtype=np.float64))
    for beta, h in zip(betas, h_list):
        out += beta * h
    return out.astype(np.float32)


def smooth_embeddings(X: np.ndarray, graph: CoocGraph, cfg: PropagationConfig) -> np.ndarray:
    """Convenience chain: normalize, propagate, fuse."""
    a_hat = normalize_adjacency(graph)
    return fuse(propagate(X, a_hat, cfg), cfg)


def write_graph(path: str | Path, graph: CoocGraph) -> None:
    """Persist as TSV triples `i \\t j \\t w` with i < j."""
    coo = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes={graph.n_nodes} window={graph.window}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r}\t{c}\t{v:g}\n")


def load_graph(path: str | Path) -> CoocGraph:
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    n_nodes = 0
    window = 0
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing graph header line")
        for part in header[1:].split():
            key, _, value = part.partition("=")
            if key == "nodes":
                n_nodes = int(value)
            elif key == "window":
                window = int(value)
        for line in fh:
            i, j, w = line.rstrip("\n").split("\t")
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(w))
    upper = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
    return CoocGraph((upper + upper.T).tocsr(), window)
