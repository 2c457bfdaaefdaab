"""Beam-search SID generation and resolution to ranked item lists.

Each beam advances one level in a single fused step: the thinking vector is
produced deterministically (never expanded over), then the beam expands over
the level's code vocabulary and the global top-B survive. Scores are sums of
the model's raw per-level log-softmax values, so a constrained run keeps the
same score semantics as an unconstrained one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import S2GRModel
from .tokenizer import SidTable


class PrefixTrie:
    """Allowed next codes per SID prefix, built from the catalog table."""

    def __init__(self):
        self.children: dict[tuple[int, ...], set[int]] = {}

    @classmethod
    def from_table(cls, table: SidTable) -> "PrefixTrie":
        trie = cls()
        for row in table.codes.tolist():
            for depth in range(len(row)):
                trie.children.setdefault(tuple(row[:depth]), set()).add(row[depth])
        return trie

    def allowed(self, prefix: tuple[int, ...]) -> set[int]:
        return self.children.get(prefix, set())

    def __len__(self) -> int:
        return len(self.children)


@dataclass
class Beam:
    codes: tuple[int, ...]
    score: float


def beam_search_batch(
    model: S2GRModel,
    histories: list[list[tuple[int, ...]]],
    width: int,
    constrain: bool,
    trie: PrefixTrie | None,
) -> list[list[Beam]]:
    """Fused think+code beam search for a batch of users."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if constrain and (trie is None or len(trie) == 0):
        raise ValueError("constrained decoding requires a nonempty prefix trie")
    model.eval()
    with torch.no_grad():
        memory, mem_mask = model.encode_batch(histories)
        return _beam_from_memory(model, memory, mem_mask, width, constrain, trie)


def beam_search(model: S2GRModel, h_enc: torch.Tensor, width: int,
                constrain: bool = False, trie: PrefixTrie | None = None) -> list[Beam]:
    """Single-user search over an already-encoded history (T, d_model)."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if constrain and (trie is None or len(trie) == 0):
        raise ValueError("constrained decoding requires a nonempty prefix trie")
    model.eval()
    with torch.no_grad():
        return _beam_from_memory(model, h_enc.unsqueeze(0), None, width, constrain, trie)[0]


def _beam_from_memory(model, memory, mem_mask, width, constrain, trie):
    cfg = model.cfg
    n_users = memory.shape[0]
    cache = model.make_cache(memory, mem_mask)
    h = model.decode_step(model.bos_embedding(n_users), cache)

    beam_user = np.arange(n_users)
    beam_codes: list[tuple[int, ...]] = [() for _ in range(n_users)]
    scores = np.zeros(n_users)

    for level in range(cfg.levels):
        if not cfg.no_reason:
            think = h + model.think_pos[level]
            h = model.decode_step(think.unsqueeze(1), cache)
        logp = F.log_softmax(model.level_logits(h, level), dim=-1).numpy()

        cand_scores = scores[:, None] + logp
        if constrain:
            allowed_mask = np.zeros_like(cand_scores, dtype=bool)
            for row, prefix in enumerate(beam_codes):
                for code in trie.allowed(prefix):
                    allowed_mask[row, code] = True
            cand_scores = np.where(allowed_mask, cand_scores, -np.inf)

        new_rows: list[int] = []
        new_codes: list[tuple[int, ...]] = []
        new_scores: list[float] = []
        new_users: list[int] = []
        k = cfg.codebook_size
        for user in range(n_users):
            rows = np.flatnonzero(beam_user == user)
            flat = cand_scores[rows].ravel()
            finite = np.flatnonzero(np.isfinite(flat))
            if finite.size == 0:
                raise ValueError(f"beam search: no viable continuation for user {user}")
            # sort by score desc, then parent beam order, then code index
            order = finite[np.lexsort((finite % k, finite // k, -flat[finite]))]
            for flat_idx in order[:width]:
                parent = rows[flat_idx // k]
                code = int(flat_idx % k)
                new_rows.append(int(parent))
                new_codes.append(beam_codes[parent] + (code,))
                new_scores.append(float(flat[flat_idx]))
                new_users.append(user)

        parent_idx = torch.as_tensor(new_rows, dtype=torch.long)
        cache = cache.reorder(parent_idx)
        beam_codes = new_codes
        scores = np.asarray(new_scores)
        beam_user = np.asarray(new_users)
        if level < cfg.levels - 1:
            last_codes = torch.as_tensor([c[-1] for c in beam_codes], dtype=torch.long)
            code_emb = model.code_embedding(level, last_codes)
            h = model.decode_step(code_emb.unsqueeze(1), cache)

    results: list[list[Beam]] = []
    for user in range(n_users):
        rows = np.flatnonzero(beam_user == user)
        beams = [Beam(beam_codes[r], float(scores[r])) for r in rows]
        beams.sort(key=lambda b: (-b.score, b.codes))
        results.append(beams)
    return results


def score_sequence(model: S2GRModel, h_enc: torch.Tensor, codes: tuple[int, ...]) -> float:
    """From-scratch forced decode: sum of per-level log-softmax at `codes`."""
    cfg = model.cfg
    model.eval()
    with torch.no_grad():
        memory = h_enc.unsqueeze(0)
        targets = torch.as_tensor([list(codes)], dtype=torch.long)
        trace = model.stepwise_decode_train(memory, None, targets, compute_global=False)
        total = 0.0
        for level, logits in enumerate(trace.logits):
            total += float(F.log_softmax(logits[0], dim=-1)[codes[level]].item())
    return total


def resolve_items(beams: list[Beam], table: SidTable, k_eval: int) -> list[tuple[int, float]]:
    """Map ranked SIDs to items.

    Colliding items all emit at the shared beam score in ascending item-id
    order; SIDs absent from the catalog are skipped. Stops once k_eval items
    are collected.
    """
    if table.n_items == 0:
        raise ValueError("resolve_items: empty SID table")
    out: list[tuple[int, float]] = []
    for beam in beams:
        hits = table.reverse.get(beam.codes)
        if not hits:
            continue
        for item in hits:
            out.append((item, beam.score))
            if len(out) >= k_eval:
                return out
    return out


def write_rankings(path: str | Path, rankings: dict[int, list[tuple[int, float]]]) -> None:
    """Batch inference output: TSV `user_id \\t rank \\t item_id \\t score`."""
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(rankings):
            for rank, (item, score) in enumerate(rankings[user], start=1):
                fh.write(f"{user}\t{rank}\t{item}\t{score:.6f}\n")


def load_rankings(path: str | Path) -> dict[int, list[tuple[int, float]]]:
    rankings: dict[int, list[tuple[int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            user, rank, item, score = line.rstrip("\n").split("\t")
            rankings.setdefault(int(user), []).append((int(item), float(score)))
    return rankings
