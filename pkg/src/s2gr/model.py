"""Sequence model: SID-history encoder and latent-reasoning decoder.

The encoder consumes the flattened SID tokens of the user history (level-
offset vocabulary, learned absolute positions). The decoder alternates two
kinds of positions: a thinking token, produced by feeding the decoder's own
final hidden state back as the next input embedding plus a level-specific
position vector, and a teacher-forced SID code token. Decoder positions need
no absolute position embedding: every slot is uniquely identified by its
content (BOS, level-tagged thinking vector, or level-offset code token).

Vocabulary layout: 0 = PAD, 1 = BOS, code c of level l at 2 + l*K + c.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericalError
from .numerics import Adam, seed_everything
from .checkpoint import load_checkpoint, save_checkpoint

PAD_ID = 0
BOS_ID = 1
SPECIAL_TOKENS = 2


@dataclass
class ModelConfig:
    encoder_layers: int = 4
    decoder_layers: int = 4
    d_model: int = 128
    heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    temperature: float = 0.07
    reg_weight: float = 0.1
    levels: int = 3
    codebook_size: int = 256
    max_history: int = 50
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    no_reason: bool = False
    no_think_loss: bool = False
    target_embedding_source: str = "model"
    val_users: int = 256
    val_beam_width: int = 20
    seed: int = 42

    def validate(self) -> None:
        if self.d_model % self.heads != 0:
            raise ValueError("model: d_model must be divisible by heads")
        if self.temperature <= 0:
            raise ValueError("model: temperature must be > 0")
        if self.reg_weight < 0:
            raise ValueError("model: reg_weight must be >= 0")
        if self.target_embedding_source not in ("model", "quantizer"):
            raise ValueError("model: target_embedding_source must be 'model' or 'quantizer'")

    @property
    def vocab_size(self) -> int:
        return SPECIAL_TOKENS + self.levels * self.codebook_size


def code_token_id(level: int, code: int, codebook_size: int) -> int:
    return SPECIAL_TOKENS + level * codebook_size + code


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.dh = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def split(self, x: torch.Tensor, lin: nn.Linear) -> torch.Tensor:
        b, t, _ = x.shape
        return lin(x).view(b, t, self.heads, self.dh).transpose(1, 2)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
               mask: torch.Tensor | None) -> torch.Tensor:
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dh)
        if mask is not None:
            scores = scores + mask
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = attn @ v
        b, _, t, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, t, self.heads * self.dh))

    def forward(self, x: torch.Tensor, kv: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.attend(self.split(x, self.q_proj), self.split(kv, self.k_proj),
                           self.split(kv, self.v_proj), mask)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ffn_dim), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(ffn_dim, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor,
                self_mask: torch.Tensor | None, mem_mask: torch.Tensor | None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory, mem_mask))
        return x + self.drop(self.ffn(self.ln3(x)))

    def step(self, x_new: torch.Tensor, layer_cache: dict, mem_mask: torch.Tensor | None) -> torch.Tensor:
        """Incremental path: append this position's K/V and attend over the cache."""
        attn = self.self_attn
        h = self.ln1(x_new)
        k_new = attn.split(h, attn.k_proj)
        v_new = attn.split(h, attn.v_proj)
        layer_cache["k"] = k_new if layer_cache.get("k") is None else torch.cat([layer_cache["k"], k_new], dim=2)
        layer_cache["v"] = v_new if layer_cache.get("v") is None else torch.cat([layer_cache["v"], v_new], dim=2)
        x = x_new + self.drop(attn.attend(attn.split(h, attn.q_proj), layer_cache["k"], layer_cache["v"], None))
        x = x + self.drop(self.cross_attn.attend(
            self.cross_attn.split(self.ln2(x), self.cross_attn.q_proj),
            layer_cache["mem_k"], layer_cache["mem_v"], mem_mask))
        return x + self.drop(self.ffn(self.ln3(x)))


@dataclass
class DecoderCache:
    """Per-layer cached self-attention K/V plus precomputed memory K/V."""

    layers: list[dict]
    mem_mask: torch.Tensor | None
    length: int = 0

    def reorder(self, idx: torch.Tensor) -> "DecoderCache":
        new_layers = []
        for lc in self.layers:
            new_layers.append({
                "k": None if lc["k"] is None else lc["k"][idx],
                "v": None if lc["v"] is None else lc["v"][idx],
                "mem_k": lc["mem_k"][idx],
                "mem_v": lc["mem_v"][idx],
            })
        mem_mask = None if self.mem_mask is None else self.mem_mask[idx]
        return DecoderCache(new_layers, mem_mask, self.length)


@dataclass
class DecoderTrace:
    """Per-level thinking vectors and level-slice logits for one batch."""

    think: list[torch.Tensor]
    logits: list[torch.Tensor]
    v_g: torch.Tensor | None = None


def causal_mask(t: int, dtype=torch.float32) -> torch.Tensor:
    mask = torch.full((1, 1, t, t), float("-inf"), dtype=dtype)
    return mask.triu(1)


class S2GRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(cfg.max_history * cfg.levels, cfg.d_model)
        self.think_pos = nn.Parameter(torch.randn(cfg.levels, cfg.d_model) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.encoder_ln = nn.LayerNorm(cfg.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.decoder_ln = nn.LayerNorm(cfg.d_model)
        self.global_decoder = DecoderLayer(cfg)
        self.global_ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    # ----- encoder -----

    def history_token_ids(self, history: list[tuple[int, ...]]) -> list[int]:
        """Flatten SIDs oldest -> newest into level-offset token ids."""
        recent = history[-self.cfg.max_history:]
        ids = []
        for sid in recent:
            for level, code in enumerate(sid):
                ids.append(code_token_id(level, code, self.cfg.codebook_size))
        return ids

    def encode_batch(self, histories: list[list[tuple[int, ...]]]):
        """Pad, embed, and run the encoder; returns (memory, additive mem mask)."""
        if any(len(h) == 0 for h in histories):
            raise ValueError("encode_batch: empty history")
        seqs = [self.history_token_ids(h) for h in histories]
        t_max = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), t_max), PAD_ID, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        pad = ids == PAD_ID
        positions = torch.arange(t_max).unsqueeze(0).expand(len(seqs), t_max)
        x = self.tok_emb(ids) + self.pos_emb(positions)
        mask = torch.zeros(len(seqs), 1, 1, t_max)
        mask[pad.unsqueeze(1).unsqueeze(1)] = float("-inf")
        for layer in self.encoder:
            x = layer(x, mask)
        return self.encoder_ln(x), mask

    def encode_history(self, history: list[tuple[int, ...]]) -> torch.Tensor:
        """Single-user encoding -> (n_tokens, d_model)."""
        memory, _ = self.encode_batch([history])
        return memory[0]

    # ----- decoder -----

    def decode_full(self, prefix: torch.Tensor, memory: torch.Tensor,
                    mem_mask: torch.Tensor | None) -> torch.Tensor:
        """From-scratch causal decoding over an embedded prefix (B, T, D)."""
        x = prefix
        self_mask = causal_mask(prefix.shape[1])
        for layer in self.decoder:
            x = layer(x, memory, self_mask, mem_mask)
        return self.decoder_ln(x)

    def make_cache(self, memory: torch.Tensor, mem_mask: torch.Tensor | None) -> DecoderCache:
        layers = []
        for layer in self.decoder:
            ca = layer.cross_attn
            layers.append({
                "k": None,
                "v": None,
                "mem_k": ca.split(memory, ca.k_proj),
                "mem_v": ca.split(memory, ca.v_proj),
            })
        return DecoderCache(layers, mem_mask)

    def decode_step(self, x_new: torch.Tensor, cache: DecoderCache) -> torch.Tensor:
        """Incremental decoding of one appended position (B, 1, D) -> (B, D)."""
        x = x_new
        for layer, lc in zip(self.decoder, cache.layers):
            x = layer.step(x, lc, cache.mem_mask)
        cache.length += 1
        return self.decoder_ln(x)[:, 0]

    def level_logits(self, hidden: torch.Tensor, level: int) -> torch.Tensor:
        """Project to the full vocabulary, return the level's K-wide slice."""
        start = SPECIAL_TOKENS + level * self.cfg.codebook_size
        return self.head(hidden)[..., start: start + self.cfg.codebook_size]

    def bos_embedding(self, batch: int) -> torch.Tensor:
        ids = torch.full((batch, 1), BOS_ID, dtype=torch.long)
        return self.tok_emb(ids)

    def code_embedding(self, level: int, codes: torch.Tensor) -> torch.Tensor:
        ids = SPECIAL_TOKENS + level * self.cfg.codebook_size + codes
        return self.tok_emb(ids)

    def stepwise_decode_train(self, memory: torch.Tensor, mem_mask: torch.Tensor | None,
                              targets: torch.Tensor, compute_global: bool = True) -> DecoderTrace:
        """Teacher-forced trace: self-generated thinking tokens, forced codes.

        Thinking vectors feed back into the decoder input with gradients
        attached; SID codes append as ground-truth token embeddings. In
        `no_reason` mode the interleaving collapses to plain code decoding.
        """
        cfg = self.cfg
        b = memory.shape[0]
        if cfg.no_reason:
            ids = torch.cat(
                [torch.full((b, 1), BOS_ID, dtype=torch.long)]
                + [SPECIAL_TOKENS + level * cfg.codebook_size + targets[:, level: level + 1]
                   for level in range(cfg.levels)],
                dim=1,
            )
            out = self.decode_full(self.tok_emb(ids), memory, mem_mask)
            logits = [self.level_logits(out[:, level], level) for level in range(cfg.levels)]
            return DecoderTrace([], logits, None)

        prefix = self.bos_embedding(b)
        think: list[torch.Tensor] = []
        logits: list[torch.Tensor] = []
        for level in range(cfg.levels):
            h = self.decode_full(prefix, memory, mem_mask)[:, -1]
            t_l = h + self.think_pos[level]
            think.append(t_l)
            prefix = torch.cat([prefix, t_l.unsqueeze(1)], dim=1)
            h2 = self.decode_full(prefix, memory, mem_mask)[:, -1]
            logits.append(self.level_logits(h2, level))
            code_emb = self.code_embedding(level, targets[:, level])
            prefix = torch.cat([prefix, code_emb.unsqueeze(1)], dim=1)
        v_g = self.global_decode(memory, mem_mask) if compute_global else None
        return DecoderTrace(think, logits, v_g)

    def global_decode(self, memory: torch.Tensor, mem_mask: torch.Tensor | None) -> torch.Tensor:
        """One-block decoder over the BOS query: holistic next-item embedding."""
        x = self.bos_embedding(memory.shape[0])
        out = self.global_decoder(x, memory, None, mem_mask)
        return self.global_ln(out)[:, 0]

    def target_item_embedding(self, targets: torch.Tensor,
                              quantizer_codebooks: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Mean of the target's per-level code embeddings."""
        cfg = self.cfg
        if cfg.target_embedding_source == "quantizer":
            if quantizer_codebooks is None:
                raise ValueError("target_embedding_source=quantizer requires codebooks")
            rows = [quantizer_codebooks[level][targets[:, level]] for level in range(cfg.levels)]
        else:
            rows = [self.code_embedding(level, targets[:, level]) for level in range(cfg.levels)]
        return torch.stack(rows).mean(dim=0)


# ----- losses -----


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity: zero-norm input")
    return (a / na) @ (b / nb).T


def align_loss(think: torch.Tensor, target_codes: torch.Tensor, centroids: torch.Tensor,
               assignment: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy over centroid cosine similarities at the true cluster."""
    sims = _cosine_matrix(think, centroids) / tau
    labels = assignment[target_codes]
    return F.cross_entropy(sims, labels)


def infonce_loss(v_g: torch.Tensor, v_bar: torch.Tensor, tau: float) -> torch.Tensor:
    """In-batch negatives: row i of the cosine matrix classifies column i."""
    sims = _cosine_matrix(v_g, v_bar) / tau
    labels = torch.arange(sims.shape[0])
    return F.cross_entropy(sims, labels)


def reg_loss(t_1: torch.Tensor, v_g: torch.Tensor) -> torch.Tensor:
    """1 - mean cosine(t_1, sg(v_g)); gradient reaches t_1 only."""
    v = v_g.detach()
    na = torch.linalg.vector_norm(t_1, dim=-1)
    nb = torch.linalg.vector_norm(v, dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("reg_loss: zero-norm input")
    cos = (t_1 * v).sum(dim=-1) / (na * nb)
    return 1.0 - cos.mean()


@dataclass
class LossBreakdown:
    l_rec: torch.Tensor
    l_align: list[torch.Tensor]
    l_infonce: torch.Tensor
    l_reg: torch.Tensor
    lam: float = 0.0

    @property
    def l_think(self) -> torch.Tensor:
        total = self.l_infonce + self.lam * self.l_reg
        for a in self.l_align:
            total = total + a
        return total

    @property
    def total(self) -> torch.Tensor:
        return self.l_rec + self.l_think


def total_loss(trace: DecoderTrace, targets: torch.Tensor, centroids: list[torch.Tensor],
               assignments: list[torch.Tensor], v_bar: torch.Tensor | None,
               cfg: ModelConfig, think_supervision: bool = True) -> LossBreakdown:
    """Assemble the full objective from a teacher-forced trace."""
    zero = torch.zeros(())
    l_rec = zero
    for level, logits in enumerate(trace.logits):
        l_rec = l_rec + F.cross_entropy(logits, targets[:, level])
    if not think_supervision or cfg.no_reason or cfg.no_think_loss:
        return LossBreakdown(l_rec, [], zero, zero, cfg.reg_weight)
    l_align = [
        align_loss(trace.think[level], targets[:, level], centroids[level],
                   assignments[level], cfg.temperature)
        for level in range(cfg.levels)
    ]
    l_nce = infonce_loss(trace.v_g, v_bar, cfg.temperature)
    l_reg = reg_loss(trace.think[0], trace.v_g)
    return LossBreakdown(l_rec, l_align, l_nce, l_reg, cfg.reg_weight)


# ----- training -----


def _to_code_history(items: list[int], table_codes: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(c) for c in table_codes[i]) for i in items]


def train(
    model: S2GRModel,
    train_pairs: list[tuple[list[int], int]],
    sid_table,
    centroid_set,
    cfg: ModelConfig,
    valid: dict[int, tuple[list[int], int]] | None = None,
    log_fn=None,
    quantizer_codebooks: list[torch.Tensor] | None = None,
) -> list[str]:
    """Mini-batch Adam over the combined objective; returns the training log.

    Validation HR@10 is computed each epoch on a fixed subset of validation
    users via constrained beam search. A non-finite loss aborts with
    NumericalError after stashing the last finished epoch's parameters on
    `model` (attribute `last_good_state`).
    """
    from .inference import PrefixTrie, beam_search_batch, resolve_items

    cfg.validate()
    if sid_table.levels != cfg.levels:
        raise ValueError(
            f"train: SID table has {sid_table.levels} levels, model expects {cfg.levels}")
    rng = np.random.default_rng(cfg.seed)
    centroids = centroid_set.centroid_tensors() if centroid_set is not None else None
    assignments = (
        [torch.as_tensor(a, dtype=torch.long) for a in centroid_set.assignments]
        if centroid_set is not None else None
    )
    think_supervision = not (cfg.no_reason or cfg.no_think_loss)
    if think_supervision and centroid_set is None:
        raise ValueError("train: thinking-token supervision requires a centroid set")
    opt = Adam(list(model.parameters()), lr=cfg.lr, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    val_users = sorted(valid)[: cfg.val_users] if valid else []
    trie = PrefixTrie.from_table(sid_table) if val_users else None

    lines: list[str] = []
    codes = sid_table.codes
    n = len(train_pairs)
    last_good: dict | None = None
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        sums = {"total": 0.0, "rec": 0.0, "think": 0.0}
        t0 = time.time()
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            histories = [_to_code_history(train_pairs[i][0], codes) for i in idx]
            targets = torch.as_tensor(
                np.stack([codes[train_pairs[i][1]] for i in idx]), dtype=torch.long)
            memory, mem_mask = model.encode_batch(histories)
            trace = model.stepwise_decode_train(memory, mem_mask, targets,
                                                compute_global=think_supervision)
            v_bar = (
                model.target_item_embedding(targets, quantizer_codebooks)
                if think_supervision else None
            )
            breakdown = total_loss(trace, targets, centroids, assignments, v_bar, cfg,
                                   think_supervision)
            loss = breakdown.total
            if not torch.isfinite(loss):
                if last_good is not None:
                    model.last_good_state = last_good
                raise NumericalError(
                    f"model training diverged at epoch {epoch}: "
                    f"rec={breakdown.l_rec.item():.4g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            bsz = len(idx)
            sums["total"] += loss.item() * bsz
            sums["rec"] += breakdown.l_rec.item() * bsz
            sums["think"] += float(breakdown.l_think.item()) * bsz
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

        val_hr = float("nan")
        if val_users:
            model.eval()
            hits = 0
            histories = [_to_code_history(valid[u][0], codes) for u in val_users]
            ranked = beam_search_batch(model, histories, cfg.val_beam_width, True, trie)
            for u, beams in zip(val_users, ranked):
                items = resolve_items(beams, sid_table, 10)
                if valid[u][1] in [it for it, _ in items]:
                    hits += 1
            val_hr = hits / len(val_users)
        line = (f"{epoch}\t{sums['total'] / n:.6f}\t{sums['rec'] / n:.6f}"
                f"\t{sums['think'] / n:.6f}\t{val_hr:.6f}")
        lines.append(line)
        if log_fn is not None:
            log_fn(line, time.time() - t0)
    model.eval()
    return lines


def save_model(path: str | Path, model: S2GRModel) -> None:
    save_checkpoint(path, dict(model.state_dict()))


def load_model(path: str | Path, cfg: ModelConfig) -> S2GRModel:
    model = S2GRModel(cfg)
    model.load_state_dict(load_checkpoint(path))
    model.eval()
    return model
