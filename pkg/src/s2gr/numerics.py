"""Differentiable-computation primitives shared by every learned module.

Dense tensors and reverse-mode gradients are provided by torch (CPU).
Training runs in float32; gradient checks run in float64. This module owns
the pieces the rest of the pipeline relies on for its numerical contracts:
deterministic seeding, the stop-gradient operation, a functional Adam
optimizer, and a central-difference gradient checker.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericalError

__all__ = [
    "seed_everything",
    "stop_gradient",
    "cosine_sim",
    "softmax",
    "softmax_cross_entropy",
    "AdamState",
    "adam_update",
    "Adam",
    "grad_check",
]


def seed_everything(seed: int) -> None:
    """Seed torch, numpy's legacy RNG, and random for a deterministic run."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    random.seed(seed)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Pass the value forward, cut the gradient."""
    return x.detach()


def cosine_sim(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity a.b / (|a||b|) along `dim`.

    Raises ValueError on zero-norm input: a direction is undefined there and
    silently returning 0 would hide upstream collapse.
    """
    na = torch.linalg.vector_norm(a, dim=dim)
    nb = torch.linalg.vector_norm(b, dim=dim)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine_sim: zero-norm input")
    return (a * b).sum(dim=dim) / (na * nb)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax."""
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def softmax_cross_entropy(logits: torch.Tensor, target: int | torch.Tensor) -> torch.Tensor:
    """-log softmax(logits)[target] for a single logit vector.

    Computed via max-subtraction so large logits do not overflow.
    """
    if logits.dim() != 1:
        raise ValueError(f"softmax_cross_entropy expects a vector, got shape {tuple(logits.shape)}")
    idx = int(target)
    if not 0 <= idx < logits.shape[0]:
        raise IndexError(f"target {idx} out of range for {logits.shape[0]} logits")
    m = logits.max()
    return torch.log(torch.exp(logits - m).sum()) + m - logits[idx]


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def init(self, params: Sequence[torch.Tensor]) -> "AdamState":
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.t = 0
        return self


def adam_update(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
) -> AdamState:
    """One bias-corrected Adam step, in place on `params`.

    `None` gradients are treated as zero (the parameter still advances its
    moment decay, matching a zero-gradient step).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_update: params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"adam_update: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(-state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_update` for a parameter list."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps).init(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_update(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(
    f: Callable[..., torch.Tensor],
    xs: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` must be scalar-valued and is evaluated in float64 copies of `xs`.
    Relative error per coordinate is |analytic - fd| / max(1, |analytic|).
    Inputs that receive no gradient at all (fully stop-gradient paths) are
    checked against a zero analytic gradient.
    """
    xs64 = [x.detach().double().clone().requires_grad_(True) for x in xs]
    out = f(*xs64)
    if out.dim() != 0:
        raise ValueError("grad_check: f must return a scalar")
    if not torch.isfinite(out):
        raise NumericalError("grad_check: non-finite function value at x")
    analytic = torch.autograd.grad(out, xs64, allow_unused=True)

    max_rel = 0.0
    for x, g in zip(xs64, analytic):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(*[t.detach() for t in xs64])
            flat[i] = orig - h
            fm = f(*[t.detach() for t in xs64])
            flat[i] = orig
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NumericalError("grad_check: non-finite function value near x")
            fd = (fp.item() - fm.item()) / (2.0 * h)
            rel = abs(gflat[i].item() - fd) / max(1.0, abs(gflat[i].item()))
            max_rel = max(max_rel, rel)
    return max_rel
