"""Latent codes and the samplers behind them.

Three kinds of code feed the generator: a continuous ``z`` drawn from a
standard normal, a class code ``c`` and a domain code ``a``.  The two
categorical codes are either exact one-hot samples (priors) or Gumbel-softmax
relaxations of an inference head's softmax output.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PROB_ATOL = 1e-9
DEFAULT_TEMPERATURE = 0.67


def _rng(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _check_probs(probs, name: str) -> tuple:
    p = tuple(float(v) for v in probs)
    if len(p) == 0:
        raise ValueError(f"{name} is empty")
    if any(v < 0 or not np.isfinite(v) for v in p):
        raise ValueError(f"{name} has negative or non-finite entries: {p}")
    if abs(sum(p) - 1.0) > PROB_ATOL:
        raise ValueError(f"{name} sums to {sum(p)!r}, expected 1")
    return p


def uniform(k: int) -> tuple:
    return tuple([1.0 / k] * k)


@dataclass(frozen=True)
class PriorConfig:
    """Sizes and probabilities of the three latent priors.

    ``domain_probs`` is the prior over the domain code used when sampling the
    generator; ``empirical_task_probs`` is the target distribution for the
    task-inference cross-entropy.  Both default to uniform over the seen
    domains.
    """

    dim_z: int
    num_classes: int
    num_domains: int = 1
    domain_probs: Optional[Sequence[float]] = None
    class_probs: Optional[Sequence[float]] = None
    temperature: float = DEFAULT_TEMPERATURE
    empirical_task_probs: Optional[Sequence[float]] = None

    def __post_init__(self):
        for name in ("dim_z", "num_classes", "num_domains"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature!r}")
        defaults = {
            "domain_probs": uniform(self.num_domains),
            "class_probs": uniform(self.num_classes),
            "empirical_task_probs": uniform(self.num_domains),
        }
        sizes = {
            "domain_probs": self.num_domains,
            "class_probs": self.num_classes,
            "empirical_task_probs": self.num_domains,
        }
        for name, default in defaults.items():
            v = getattr(self, name)
            p = default if v is None else _check_probs(v, name)
            if len(p) != sizes[name]:
                raise ValueError(f"{name} has {len(p)} entries, expected {sizes[name]}")
            object.__setattr__(self, name, p)

    def to_dict(self) -> dict:
        return {
            "dim_z": self.dim_z,
            "num_classes": self.num_classes,
            "num_domains": self.num_domains,
            "domain_probs": list(self.domain_probs),
            "class_probs": list(self.class_probs),
            "temperature": self.temperature,
            "empirical_task_probs": list(self.empirical_task_probs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


@dataclass
class LatentTriple:
    """A batch of codes.  ``c`` is ``None`` for the unconditional (unsupervised) model."""

    z: torch.Tensor
    a: torch.Tensor
    c: Optional[torch.Tensor] = None
    hard_a: bool = True
    hard_c: bool = True

    def __len__(self):
        return self.z.shape[0]

    def select(self, idx) -> "LatentTriple":
        return LatentTriple(
            self.z[idx], self.a[idx], None if self.c is None else self.c[idx], self.hard_a, self.hard_c
        )

    def pad_domains(self, k: int) -> "LatentTriple":
        """Zero-pad the domain code to ``k`` columns (codes from an older snapshot)."""
        extra = k - self.a.shape[1]
        if extra < 0:
            raise ValueError(f"cannot shrink domain code from {self.a.shape[1]} to {k}")
        a = F.pad(self.a, (0, extra)) if extra else self.a
        return replace(self, a=a)


@dataclass
class GumbelDraw:
    g: torch.Tensor
    seed: Optional[int] = None

    @classmethod
    def sample(cls, shape, seed) -> "GumbelDraw":
        gen = _rng(seed)
        u = torch.rand(shape, generator=gen)
        # u in [0, 1); clamp away from both ends before the double log
        u = u.clamp(1e-10, 1.0 - 1e-7)
        g = -torch.log(-torch.log(u))
        return cls(g, seed if isinstance(seed, int) else None)


def sample_continuous_prior(n: int, cfg: PriorConfig, seed) -> torch.Tensor:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if cfg.dim_z < 1:
        raise ValueError("dim_z must be >= 1")
    return torch.randn(n, cfg.dim_z, generator=_rng(seed))


def sample_categorical_prior(n: int, probs, seed) -> torch.Tensor:
    """Exact one-hot samples from ``Cat(probs)``, shape ``[n, len(probs)]``."""
    p = _check_probs(probs, "probs")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = torch.multinomial(torch.tensor(p, dtype=torch.float64), n, replacement=True, generator=_rng(seed))
    return F.one_hot(idx, len(p)).to(torch.float32)


def sample_prior_codes(n: int, cfg: PriorConfig, seed, conditional: bool = True) -> LatentTriple:
    """Draw ``(z, a, c)`` from the generative priors; ``c`` omitted when not ``conditional``."""
    gen = _rng(seed)
    z = torch.randn(n, cfg.dim_z, generator=gen)
    a = sample_categorical_prior(n, cfg.domain_probs, gen)
    c = sample_categorical_prior(n, cfg.class_probs, gen) if conditional else None
    return LatentTriple(z, a, c)


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if mu.shape != sigma.shape or mu.shape != noise.shape:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)}, noise {tuple(noise.shape)}")
    if not bool((sigma > 0).all()):
        raise ValueError("sigma must be strictly positive")
    return mu + noise * sigma


def gumbel_softmax(
    logits: torch.Tensor, temperature: float, draw: GumbelDraw, hard: bool = False
) -> torch.Tensor:
    """Relaxed categorical sample from the softmax of ``logits``.

    Computes ``softmax((log softmax(logits) + g) / T)``.  With ``hard=True`` the
    forward value is the hardened one-hot while gradients flow through the
    relaxation (straight-through).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature!r}")
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("logits contain non-finite values")
    if draw.g.shape != logits.shape:
        raise ValueError(f"gumbel noise shape {tuple(draw.g.shape)} != logits shape {tuple(logits.shape)}")
    y = torch.softmax((torch.log_softmax(logits, dim=-1) + draw.g) / temperature, dim=-1)
    if hard:
        return harden(y) - y.detach() + y
    return y


def harden(relaxed: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index on ties
    idx = torch.argmax(relaxed.detach(), dim=-1)
    return F.one_hot(idx, relaxed.shape[-1]).to(relaxed.dtype)


def expand_linear(layer: nn.Linear, seed, init_std: float = 0.01) -> nn.Linear:
    """Copy of ``layer`` with one extra output unit; existing rows are copied bit-exact."""
    gen = _rng(seed)
    new = nn.Linear(layer.in_features, layer.out_features + 1, bias=layer.bias is not None)
    with torch.no_grad():
        new.weight[:-1].copy_(layer.weight)
        new.weight[-1].copy_(torch.randn(layer.in_features, generator=gen) * init_std)
        if layer.bias is not None:
            new.bias[:-1].copy_(layer.bias)
            new.bias[-1] = 0.0
    return new.to(layer.weight.device)


def expand_domain(cfg: PriorConfig, task_head: nn.Module, seed=0, epoch_in_progress: bool = False):
    """Register one more domain: ``K -> K + 1``.

    Returns the new prior config and a deep copy of ``task_head`` whose final
    linear layer gained one output unit.  The head must expose that layer as
    ``task_head.out``.
    """
    if epoch_in_progress:
        raise RuntimeError("expand_domain called while an epoch is in progress")
    k = cfg.num_domains + 1
    new_cfg = replace(cfg, num_domains=k, domain_probs=uniform(k), empirical_task_probs=uniform(k))
    head = copy.deepcopy(task_head)
    if head.out.out_features != cfg.num_domains:
        raise ValueError(f"task head has {head.out.out_features} outputs, config has K={cfg.num_domains}")
    head.out = expand_linear(head.out, seed)
    return new_cfg, head


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Row entropies (nats) of a batch of probability vectors."""
    return -(p * torch.log(p.clamp_min(1e-30))).sum(-1)
