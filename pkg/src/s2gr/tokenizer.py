"""Residual-quantized tokenizer with usage balancing and codebook uniformity.

An MLP encoder maps item embeddings to a latent vector that L residual
codebooks quantize coarse-to-fine; the decoder reconstructs from the summed
codewords (straight-through gradient). Two additions keep the codebooks
healthy: a pairwise uniformity penalty on close codeword pairs, and a
usage-balance adjustment that shrinks the selection distances of under-used
codewords during training. A level-wise residual k-means baseline produces
SID tables through the same interface.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import NumericalError
from .kmeans import kmeans
from .numerics import Adam, seed_everything
from .checkpoint import load_checkpoint, save_checkpoint


@dataclass
class QuantizerConfig:
    levels: int = 3
    codebook_size: int = 256
    latent_dim: int = 128
    hidden_dims: tuple[int, ...] = (512, 256)
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    uniformity_weight: float = 0.1
    uniform_mu: float = 1.0
    uniform_percentile: float = 10.0
    balance: bool = True
    balance_delta_max: float = 0.5
    balance_eps: float = 1e-2
    usage_decay: float = 0.99
    assign_with_balance: bool = False
    seed: int = 42

    def validate(self) -> None:
        if self.levels < 1 or self.codebook_size < 2:
            raise ValueError("quantizer: levels >= 1 and codebook_size >= 2 required")
        if not 0.0 <= self.balance_delta_max < 1.0:
            raise ValueError("quantizer: balance_delta_max must lie in [0, 1)")
        if self.balance_eps <= 0:
            raise ValueError("quantizer: balance_eps must be > 0")
        if self.uniform_mu <= 0:
            raise ValueError("quantizer: uniform_mu must be > 0")


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def balance_adjust(distances: torch.Tensor, usage: torch.Tensor,
                   delta_max: float, eps: float) -> torch.Tensor:
    """Scale distances by historical usage: under-used codewords get shrunk.

    f_k = clip((u_mean - u_k) / (u_mean + eps), -delta_max, delta_max)
    adjusted_k = d_k * (1 - f_k)
    """
    u_mean = usage.mean()
    f = torch.clamp((u_mean - usage) / (u_mean + eps), -delta_max, delta_max)
    return distances * (1.0 - f)


def quantize_level(
    r_prev: torch.Tensor,
    codebook: torch.Tensor,
    usage: torch.Tensor | None = None,
    balance_on: bool = False,
    delta_max: float = 0.5,
    eps: float = 1e-2,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-codeword selection for one level; returns (codes, next residual).

    Selection uses balance-adjusted distances when `balance_on`, raw squared
    distances otherwise; ties resolve to the lowest index. The returned
    residual always subtracts the selected codeword itself.
    """
    single = r_prev.dim() == 1
    r = r_prev.unsqueeze(0) if single else r_prev
    with torch.no_grad():
        # explicit difference keeps exact ties exact (no matmul shortcut)
        d = (r.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(dim=-1)
        if balance_on:
            if usage is None:
                raise ValueError("quantize_level: balance_on requires usage counters")
            d = balance_adjust(d, usage, delta_max, eps)
        codes = d.argmin(dim=1)
    r_next = r - codebook[codes]
    if single:
        return codes[0], r_next[0]
    return codes, r_next


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sample squared reconstruction error."""
    return (x - x_hat).pow(2).sum(dim=-1).mean()


def quantization_loss(residuals: list[torch.Tensor], codewords: list[torch.Tensor]) -> torch.Tensor:
    """Codebook + commitment terms with stop-gradients, summed over levels.

    residuals[l] is r_{l-1} (the quantizer input at level l), codewords[l]
    the selected codeword rows at that level.
    """
    total = 0.0
    for r_prev, e in zip(residuals, codewords):
        total = total + (r_prev - e.detach()).pow(2).sum(dim=-1).mean()
        total = total + (e - r_prev.detach()).pow(2).sum(dim=-1).mean()
    return total


def pairwise_sq_dists(codebook: torch.Tensor) -> torch.Tensor:
    """Squared distances of unordered codeword pairs (i < j), flattened."""
    k = codebook.shape[0]
    diff = codebook.unsqueeze(0) - codebook.unsqueeze(1)
    d2 = diff.pow(2).sum(dim=-1)
    iu = torch.triu_indices(k, k, offset=1)
    return d2[iu[0], iu[1]]


def uniform_loss(codebook: torch.Tensor, delta: float, mu: float) -> torch.Tensor:
    """log(1 + sum over close pairs of exp(-mu * D_ij)); 0 when no pair is close."""
    d2 = pairwise_sq_dists(codebook)
    close = d2 <= delta
    if not close.any():
        return torch.zeros((), dtype=codebook.dtype)
    return torch.log1p(torch.exp(-mu * d2[close]).sum())


def adaptive_delta(codebook: torch.Tensor, percentile: float) -> float:
    """q-th percentile of the current within-level pairwise squared distances."""
    with torch.no_grad():
        d2 = pairwise_sq_dists(codebook)
    return float(np.percentile(d2.cpu().numpy(), percentile))


class QuantizerModel(nn.Module):
    """Encoder, decoder, L codebooks, and per-level usage counters."""

    def __init__(self, input_dim: int, cfg: QuantizerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = [input_dim, *cfg.hidden_dims, cfg.latent_dim]
        self.encoder = _mlp(dims)
        self.decoder = _mlp(dims[::-1])
        self.codebooks = nn.Parameter(
            torch.randn(cfg.levels, cfg.codebook_size, cfg.latent_dim) * 0.1
        )
        self.register_buffer("usage", torch.zeros(cfg.levels, cfg.codebook_size))
        self.frozen = False

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def quantize(self, z: torch.Tensor, balance_on: bool):
        """Run all levels; returns (codes, residual inputs, selected codewords)."""
        cfg = self.cfg
        residuals = []
        selected = []
        codes = []
        r = z
        for level in range(cfg.levels):
            residuals.append(r)
            c, r = quantize_level(
                r, self.codebooks[level], self.usage[level], balance_on,
                cfg.balance_delta_max, cfg.balance_eps,
            )
            codes.append(c)
            selected.append(self.codebooks[level][c])
        return torch.stack(codes, dim=-1), residuals, selected, r

    def forward(self, x: torch.Tensor, balance_on: bool = False):
        z = self.encode(x)
        codes, residuals, selected, r_last = self.quantize(z, balance_on)
        quantized = torch.stack(selected).sum(dim=0)
        z_st = z + (quantized - z).detach()
        x_hat = self.decoder(z_st)
        return x_hat, z, codes, residuals, selected, r_last

    def vae_losses(self, x: torch.Tensor, balance_on: bool = False):
        x_hat, _, codes, residuals, selected, _ = self.forward(x, balance_on)
        return reconstruction_loss(x, x_hat), quantization_loss(residuals, selected), codes

    def uniformity_losses(self) -> torch.Tensor:
        cfg = self.cfg
        total = torch.zeros((), dtype=self.codebooks.dtype)
        for level in range(cfg.levels):
            cb = self.codebooks[level]
            delta = adaptive_delta(cb, cfg.uniform_percentile)
            total = total + uniform_loss(cb, delta, cfg.uniform_mu)
        return total

    @torch.no_grad()
    def update_usage(self, codes: torch.Tensor) -> None:
        """EMA-merge this batch's per-level assignment counts into the counters."""
        cfg = self.cfg
        for level in range(cfg.levels):
            counts = torch.bincount(codes[:, level], minlength=cfg.codebook_size).float()
            self.usage[level].mul_(cfg.usage_decay).add_(counts, alpha=1.0 - cfg.usage_decay)

    @torch.no_grad()
    def init_codebooks_from_data(self, x: torch.Tensor, rng: np.random.Generator) -> None:
        """Seed each level's codebook with sampled residuals of the level above."""
        cfg = self.cfg
        r = self.encode(x)
        for level in range(cfg.levels):
            n = r.shape[0]
            if n >= cfg.codebook_size:
                idx = rng.choice(n, size=cfg.codebook_size, replace=False)
            else:
                idx = rng.choice(n, size=cfg.codebook_size, replace=True)
            sample = r[torch.as_tensor(idx, dtype=torch.long)].clone()
            if n < cfg.codebook_size:
                sample += torch.as_tensor(
                    rng.normal(0.0, 1e-3, size=sample.shape), dtype=sample.dtype
                )
            self.codebooks[level] = sample
            _, r = quantize_level(r, self.codebooks[level])


def train_tokenizer(h_align: np.ndarray, cfg: QuantizerConfig,
                    log_fn=None) -> QuantizerModel:
    """Minimize recon + quant + w_u * uniformity with Adam, seeded end to end.

    Balance adjustment steers codeword selection during training only; usage
    counters are EMA-updated at batch end. Raises NumericalError with the
    loss breakdown if the objective turns non-finite.
    """
    cfg.validate()
    seed_everything(cfg.seed)
    model = QuantizerModel(h_align.shape[1], cfg)
    x_all = torch.as_tensor(np.asarray(h_align, dtype=np.float32))
    rng = np.random.default_rng(cfg.seed)
    model.init_codebooks_from_data(x_all, rng)
    opt = Adam(list(model.parameters()), lr=cfg.lr, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    n = x_all.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = x_all[torch.as_tensor(perm[start:start + cfg.batch_size], dtype=torch.long)]
            l_recon, l_quant, codes = model.vae_losses(batch, balance_on=cfg.balance)
            l_uniform = model.uniformity_losses()
            loss = l_recon + l_quant + cfg.uniformity_weight * l_uniform
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"tokenizer diverged at epoch {epoch}: recon={l_recon.item():.4g} "
                    f"quant={l_quant.item():.4g} uniform={l_uniform.item():.4g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfg.balance:
                model.update_usage(codes)
            epoch_loss += float(loss.item()) * batch.shape[0]
        if log_fn is not None:
            log_fn(epoch, epoch_loss / n)
    model.frozen = True
    return model


@dataclass
class SidTable:
    """Forward item -> SID map plus the reverse multimap."""

    codes: np.ndarray  # (N, L) int64
    codebook_size: int
    codebooks: list[np.ndarray] | None = None
    _reverse: dict[tuple[int, ...], list[int]] = field(default=None, repr=False)

    @property
    def n_items(self) -> int:
        return self.codes.shape[0]

    @property
    def levels(self) -> int:
        return self.codes.shape[1]

    def sid(self, item: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.codes[item])

    @property
    def reverse(self) -> dict[tuple[int, ...], list[int]]:
        if self._reverse is None:
            rev: dict[tuple[int, ...], list[int]] = {}
            for item in range(self.n_items):
                rev.setdefault(self.sid(item), []).append(item)
            self._reverse = rev
        return self._reverse


def assign_sids(model: QuantizerModel, h_align: np.ndarray) -> SidTable:
    """Map every item through the frozen tokenizer.

    Uses raw nearest-neighbor distances unless cfg.assign_with_balance is
    set; counters are never updated here, so the map is a pure function of
    the embeddings.
    """
    cfg = model.cfg
    model.eval()
    x = torch.as_tensor(np.asarray(h_align, dtype=np.float32))
    chunks = []
    with torch.no_grad():
        for start in range(0, x.shape[0], 1024):
            z = model.encode(x[start:start + 1024])
            codes, _, _, _ = model.quantize(z, balance_on=cfg.assign_with_balance)
            chunks.append(codes)
    codebooks = [model.codebooks[level].detach().numpy().astype(np.float64)
                 for level in range(cfg.levels)]
    return SidTable(torch.cat(chunks).numpy().astype(np.int64), cfg.codebook_size, codebooks)


def rq_kmeans(h_align: np.ndarray, levels: int, codebook_size: int, seed: int) -> SidTable:
    """Level-wise k-means over residuals: the non-learned tokenizer baseline."""
    X = np.asarray(h_align, dtype=np.float64)
    if X.shape[0] < codebook_size:
        raise ValueError(f"rq_kmeans needs N >= K, got N={X.shape[0]} K={codebook_size}")
    residual = X.copy()
    codes = np.empty((X.shape[0], levels), dtype=np.int64)
    codebooks = []
    for level in range(levels):
        centers, labels, _ = kmeans(residual, codebook_size, seed=seed + level)
        codes[:, level] = labels
        residual -= centers[labels]
        codebooks.append(centers)
    return SidTable(codes, codebook_size, codebooks)


def compute_cur_icr(table: SidTable, levels: int, codebook_size: int) -> tuple[float, float]:
    """Codebook utilization rate and independent coding rate.

    CUR = distinct SIDs / K^L; ICR = fraction of items whose SID no other
    item shares.
    """
    counts = Counter(tuple(row) for row in table.codes.tolist())
    cur = len(counts) / float(codebook_size) ** levels
    unshared = sum(1 for row in table.codes.tolist() if counts[tuple(row)] == 1)
    icr = unshared / table.n_items
    return cur, icr


def write_sid_table(path: str | Path, table: SidTable) -> None:
    """TSV `item_id \\t c1 \\t ... \\t cL`."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in range(table.n_items):
            codes = "\t".join(str(int(c)) for c in table.codes[item])
            fh.write(f"{item}\t{codes}\n")


def load_sid_table(path: str | Path, codebook_size: int) -> SidTable:
    rows: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = [int(x) for x in line.rstrip("\n").split("\t")]
            rows.append(parts[1:])
    return SidTable(np.asarray(rows, dtype=np.int64), codebook_size)


def save_tokenizer(path: str | Path, model: QuantizerModel) -> None:
    tensors = {name: param for name, param in model.state_dict().items()}
    tensors["meta"] = torch.tensor(
        [model.encoder[0].in_features, model.cfg.levels, model.cfg.codebook_size,
         model.cfg.latent_dim], dtype=torch.float32,
    )
    save_checkpoint(path, tensors)


def load_tokenizer(path: str | Path, cfg: QuantizerConfig) -> QuantizerModel:
    tensors = load_checkpoint(path)
    meta = tensors.pop("meta")
    input_dim = int(meta[0].item())
    model = QuantizerModel(input_dim, cfg)
    model.load_state_dict(tensors)
    model.frozen = True
    model.eval()
    return model
