"""Ranking metrics, length-bucketed breakdowns, and ablation orchestration.

Single-ground-truth protocol: exactly one relevant item per test sample, so
the ideal DCG is 1 and NDCG@K reduces to 1/log2(rank + 1) for hits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path


def _rank_of(ranking: list[int], target: int) -> int | None:
    try:
        return ranking.index(target) + 1
    except ValueError:
        return None


def hit_rate(rankings: list[list[int]], targets: list[int], k: int) -> float:
    """Fraction of samples whose target appears in the top k."""
    if len(rankings) != len(targets):
        raise ValueError("hit_rate: one ranking per target required")
    hits = 0
    for ranking, target in zip(rankings, targets):
        rank = _rank_of(ranking[:k], target)
        if rank is not None:
            hits += 1
    return hits / len(targets) if targets else 0.0


def ndcg(rankings: list[list[int]], targets: list[int], k: int) -> float:
    """Mean of 1/log2(rank+1) over samples whose target lands in the top k."""
    if len(rankings) != len(targets):
        raise ValueError("ndcg: one ranking per target required")
    total = 0.0
    for ranking, target in zip(rankings, targets):
        rank = _rank_of(ranking[:k], target)
        if rank is not None:
            total += 1.0 / math.log2(rank + 1)
    return total / len(targets) if targets else 0.0


@dataclass
class MetricReport:
    cutoffs: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_samples: int
    buckets: dict[str, "MetricReport"] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"samples\t{self.n_samples}"]
        for k in self.cutoffs:
            out.append(f"HR@{k}\t{self.hr[k]:.6f}")
            out.append(f"NDCG@{k}\t{self.ndcg[k]:.6f}")
        for name, sub in self.buckets.items():
            if sub.n_samples == 0:
                out.append(f"bucket[{name}]\tn=0")
                continue
            metrics = "\t".join(
                f"HR@{k}={sub.hr[k]:.6f}\tNDCG@{k}={sub.ndcg[k]:.6f}" for k in sub.cutoffs
            )
            out.append(f"bucket[{name}]\tn={sub.n_samples}\t{metrics}")
        return out


def evaluate_rankings(rankings: list[list[int]], targets: list[int],
                      cutoffs: list[int]) -> MetricReport:
    return MetricReport(
        cutoffs=list(cutoffs),
        hr={k: hit_rate(rankings, targets, k) for k in cutoffs},
        ndcg={k: ndcg(rankings, targets, k) for k in cutoffs},
        n_samples=len(targets),
    )


def bucket_by_length(rankings: list[list[int]], targets: list[int],
                     lengths: list[int], edges: list[int],
                     cutoffs: list[int]) -> dict[str, MetricReport]:
    """Split samples by history length at `edges` (strictly increasing).

    Produces len(edges)+1 buckets: (-inf, e1], (e1, e2], ..., (eN, inf).
    Empty buckets report n=0 with metrics omitted.
    """
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    names = []
    lo = None
    for e in edges:
        names.append(f"<={e}" if lo is None else f"{lo + 1}-{e}")
        lo = e
    names.append(f">{edges[-1]}" if edges else "all")

    def bucket_of(length: int) -> int:
        for i, e in enumerate(edges):
            if length <= e:
                return i
        return len(edges)

    grouped: dict[int, tuple[list[list[int]], list[int]]] = {
        i: ([], []) for i in range(len(names))
    }
    for ranking, target, length in zip(rankings, targets, lengths):
        rk, tg = grouped[bucket_of(length)]
        rk.append(ranking)
        tg.append(target)
    out: dict[str, MetricReport] = {}
    for i, name in enumerate(names):
        rk, tg = grouped[i]
        if tg:
            out[name] = evaluate_rankings(rk, tg, cutoffs)
        else:
            out[name] = MetricReport(list(cutoffs), {}, {}, 0)
    return out


def write_report(path: str | Path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in report.lines():
            fh.write(line + "\n")


def format_ablation_table(rows: dict[str, MetricReport], cutoffs: list[int]) -> str:
    """Aligned text table, one row per variant."""
    headers = ["variant"] + [f"HR@{k}" for k in cutoffs] + [f"NDCG@{k}" for k in cutoffs]
    table = [headers]
    for variant, report in rows.items():
        table.append(
            [variant]
            + [f"{report.hr[k]:.4f}" for k in cutoffs]
            + [f"{report.ndcg[k]:.4f}" for k in cutoffs]
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    return "\n".join(lines)


def write_ablation_tsv(path: str | Path, rows: dict[str, MetricReport],
                       cutoffs: list[int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = ["variant"] + [f"hr@{k}" for k in cutoffs] + [f"ndcg@{k}" for k in cutoffs]
        fh.write("\t".join(header) + "\n")
        for variant, report in rows.items():
            cells = [variant] + [f"{report.hr[k]:.6f}" for k in cutoffs] \
                + [f"{report.ndcg[k]:.6f}" for k in cutoffs]
            fh.write("\t".join(cells) + "\n")
