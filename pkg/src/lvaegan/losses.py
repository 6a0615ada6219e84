"""Training objectives.

Every "maximise" objective (the ELBOs) is reported with its natural sign in
``LossReport.terms["total"]``, while ``LossReport.objective`` is always the
quantity handed to the optimiser, i.e. something to *minimise*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .latent import GumbelDraw, PriorConfig, _rng, gumbel_softmax, harden, reparameterize
from .nets import ModelBundle, infer_z


class NonFiniteLossError(FloatingPointError):
    """Raised instead of taking an optimiser step on a NaN/inf loss."""

    def __init__(self, message: str, record: Optional[dict] = None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class LossWeights:
    gp_lambda: float = 10.0
    beta: float = 1.0
    gamma: float = 0.0
    disentangle: bool = False
    capacity_start: float = 0.5
    capacity_end: float = 25.0
    # None: ramp over the whole of each task's training
    capacity_steps: Optional[int] = None
    n_critic: int = 5
    # weight of the labelled class cross-entropy in semi mode
    alpha: float = 1.0
    # weight of the class-consistency term in the generator step (0 disables it)
    class_consistency: float = 1.0

    def __post_init__(self):
        if min(self.gp_lambda, self.beta, self.gamma, self.alpha, self.class_consistency) < 0:
            raise ValueError("gp_lambda, beta, gamma, alpha and class_consistency must be non-negative")
        if self.capacity_start > self.capacity_end:
            raise ValueError("capacity ramp must be non-decreasing")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")

    def capacity(self, step: int, total_steps: int) -> float:
        """Linearly ramped capacity ``C`` at a given step of the task."""
        span = self.capacity_steps or total_steps
        frac = min(max(step / span, 0.0), 1.0) if span > 0 else 1.0
        return self.capacity_start + (self.capacity_end - self.capacity_start) * frac


@dataclass
class LossReport:
    objective: torch.Tensor
    terms: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items()}
        out["objective"] = float(self.objective.detach())
        return out

    def check_finite(self, where: str = ""):
        bad = {k: v for k, v in self.scalars().items() if not math.isfinite(v)}
        if bad:
            raise NonFiniteLossError(f"non-finite loss terms {sorted(bad)} {where}".strip(), self.scalars())


@dataclass
class SourceBatch:
    """Images from one source (current task or replay) with optional labels.

    ``y`` holds class indices and ``task`` domain indices, both ``LongTensor``.
    """

    x: torch.Tensor
    y: Optional[torch.Tensor] = None
    task: Optional[torch.Tensor] = None

    def __len__(self):
        return self.x.shape[0]


@dataclass
class ElboDraws:
    """Noise for one single-sample ELBO estimate: ``pi`` for z and Gumbel noise for a and c."""

    z_noise: torch.Tensor
    gumbel_a: GumbelDraw
    gumbel_c: Optional[GumbelDraw] = None

    @classmethod
    def sample(cls, n: int, cfg: PriorConfig, seed, conditional: bool = True) -> "ElboDraws":
        gen = _rng(seed)
        z_noise = torch.randn(n, cfg.dim_z, generator=gen)
        g_a = GumbelDraw.sample((n, cfg.num_domains), gen)
        g_c = GumbelDraw.sample((n, cfg.num_classes), gen) if conditional else None
        return cls(z_noise, g_a, g_c)


# ---------------------------------------------------------------- divergences


def kl_gaussian_std(mu: torch.Tensor, sigma: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``KL[N(mu, diag sigma^2) || N(0, I)]``, summed over dimensions."""
    if not bool((sigma > 0).all()):
        raise ValueError("sigma must be strictly positive")
    kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma))
    kl = kl.sum(-1) if kl.dim() > 0 else kl
    return kl.mean() if reduction == "mean" else kl


def _check_simplex(p: torch.Tensor, name: str, atol: float = 1e-5):
    if bool((p < 0).any()) or not bool(torch.isfinite(p).all()):
        raise ValueError(f"{name} has negative or non-finite entries")
    if not torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=atol):
        raise ValueError(f"{name} rows do not sum to 1")


def kl_categorical(q: torch.Tensor, p, reduction: str = "mean") -> torch.Tensor:
    """``KL[q || p]`` for rows of probability vectors ``q`` against ``p``."""
    p = torch.as_tensor(p, dtype=q.dtype)
    _check_simplex(q, "q")
    _check_simplex(p, "p")
    p = p.expand_as(q)
    kl = (torch.xlogy(q, q) - torch.xlogy(q, p)).sum(-1)
    if bool(torch.isinf(kl).any()):
        raise ValueError("q puts mass where p has none")
    return kl.mean() if reduction == "mean" else kl


def capacity_penalty(kl: torch.Tensor, gamma: float, capacity: float) -> torch.Tensor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return gamma * (kl - capacity).abs()


# ---------------------------------------------------------------- adversarial


def gradient_penalty(critic, real, fake, u=None, seed=0, create_graph: bool = True) -> torch.Tensor:
    """Mean of ``(||grad_x D(x_hat)||_2 - 1)^2`` at ``x_hat = u * real + (1 - u) * fake``."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ in shape")
    n = real.shape[0]
    if u is None:
        u = torch.rand(n, generator=_rng(seed))
    u = torch.as_tensor(u, dtype=real.dtype).reshape(n, *([1] * (real.dim() - 1)))
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(n, -1).norm(dim=1)
    return (norms - 1.0).pow(2).mean()


def critic_loss(critic, real, fake, gp_lambda: float, u=None, seed=0):
    """``E[D(fake)] - E[D(real)] + lambda * gp``; returns ``(d_loss, gp)``."""
    fake = fake.detach()
    gp = gradient_penalty(critic, real, fake, u=u, seed=seed) if gp_lambda > 0 else real.new_zeros(())
    d_loss = critic(fake).mean() - critic(real).mean() + gp_lambda * gp
    return d_loss, gp


def generator_loss(critic, fake) -> torch.Tensor:
    return -critic(fake).mean()


def class_consistency_loss(class_head, fake, c) -> torch.Tensor:
    """Cross-entropy of the classifier on generated images against the class code they came from.

    Only the generator is stepped on this term; it keeps ``c`` meaningful so
    that replayed samples carry their labels.
    """
    return F.cross_entropy(class_head(fake), harden(c).argmax(1))


def wgan_losses(critic, generator, real, codes, weights: LossWeights, u=None, seed=0):
    """Critic and generator losses on one real batch and one batch of prior codes."""
    if codes.c is None and generator.arch.conditional:
        raise ValueError("conditional generator needs class codes")
    fake = generator(codes.z, codes.a, codes.c)
    d_loss, _ = critic_loss(critic, real, fake, weights.gp_lambda, u=u, seed=seed)
    g_loss = generator_loss(critic, fake)
    for name, v in (("d_loss", d_loss), ("g_loss", g_loss)):
        if not bool(torch.isfinite(v)):
            raise NonFiniteLossError(f"{name} is non-finite", {name: float(v.detach())})
    return d_loss, g_loss


# ---------------------------------------------------------------- likelihood / ELBO


def log_likelihood(generator, x, z, a, c, obs_sigma: float = 1.0) -> torch.Tensor:
    """Per-sample ``log p(x | z, a, c)``: Bernoulli for sigmoid generators, Gaussian otherwise."""
    out = generator.logits(z, a, c)
    if generator.arch.output == "sigmoid":
        ll = -F.binary_cross_entropy_with_logits(out, x, reduction="none")
    else:
        ll = -0.5 * ((x - out) / obs_sigma).pow(2) - math.log(obs_sigma) - 0.5 * math.log(2 * math.pi)
    return ll.reshape(x.shape[0], -1).sum(1)


def _elbo_parts(bundle: ModelBundle, x, cfg: PriorConfig, draws: ElboDraws, labels=None,
                drop_class: bool = False, obs_sigma: float = 1.0) -> dict:
    mu, sigma = infer_z(bundle.z_encoder, x)
    z = reparameterize(mu, sigma, draws.z_noise)
    a_logits = bundle.task_head(z)
    a = gumbel_softmax(a_logits, cfg.temperature, draws.gumbel_a)
    kl_a = kl_categorical(torch.softmax(a_logits, -1), cfg.domain_probs)
    c = None
    kl_c = x.new_zeros(())
    c_logits = None
    if bundle.arch.conditional and not drop_class:
        c_logits = bundle.class_head(x)
        kl_c = kl_categorical(torch.softmax(c_logits, -1), cfg.class_probs)
        if labels is not None:
            c = F.one_hot(labels, bundle.arch.num_classes).to(x.dtype)
        else:
            c = gumbel_softmax(c_logits, cfg.temperature, draws.gumbel_c)
    recon = log_likelihood(bundle.generator, x, z, a, c, obs_sigma).mean()
    return {
        "recon": recon,
        "kl_z": kl_gaussian_std(mu, sigma),
        "kl_a": kl_a,
        "kl_c": kl_c,
        "z": z,
        "a_logits": a_logits,
        "c_logits": c_logits,
    }


def _draws_for(n, cfg, bundle, draws, seed):
    if draws is not None:
        return draws
    return ElboDraws.sample(n, cfg, seed, conditional=bundle.arch.conditional)


def elbo_joint(bundle: ModelBundle, x, cfg: PriorConfig, draws: Optional[ElboDraws] = None, seed=0,
               labels=None, obs_sigma: float = 1.0) -> LossReport:
    """Single-sample ELBO ``recon - kl_z - kl_a - kl_c`` averaged over the batch.

    ``labels`` replaces the sampled class code in the decoder by the given
    one-hot labels (the labelled-data variant).
    """
    parts = _elbo_parts(bundle, x, cfg, _draws_for(len(x), cfg, bundle, draws, seed), labels, obs_sigma=obs_sigma)
    total = parts["recon"] - parts["kl_z"] - parts["kl_a"] - parts["kl_c"]
    terms = {k: parts[k] for k in ("recon", "kl_z", "kl_a", "kl_c")}
    terms["total"] = total
    report = LossReport(-total, terms)
    report.check_finite("in elbo_joint")
    return report


def _as_onehot_or_index(labels: torch.Tensor, k: int) -> torch.Tensor:
    if labels.dim() == 2:
        if labels.shape[1] != k:
            raise ValueError(f"one-hot labels have {labels.shape[1]} columns, expected {k}")
        return labels.argmax(1)
    if bool((labels < 0).any()) or bool((labels >= k).any()):
        raise ValueError(f"label index outside [0, {k})")
    return labels


def _ce(logits, labels) -> torch.Tensor:
    return F.cross_entropy(logits, _as_onehot_or_index(labels, logits.shape[1]))


def task_ce(task_head, z, a_star) -> torch.Tensor:
    """Mean cross-entropy of ``q_eps(a | z)`` against task labels (indices or one-hot)."""
    return _ce(task_head(z), a_star)


def class_ce(class_head, x, y) -> torch.Tensor:
    return _ce(class_head(x), y)


# ---------------------------------------------------------------- dreaming-phase objectives


def _accumulate(acc: dict, key: str, value):
    acc[key] = acc.get(key, 0) + value


def _sources(current, replay):
    out = [("current", current)]
    if replay is not None and len(replay) > 0:
        out.append(("replay", replay))
    return out


def _split_draws(draws, i):
    if draws is None:
        return None
    return draws[i] if isinstance(draws, (list, tuple)) else draws


def dream_loss_supervised(bundle: ModelBundle, current: SourceBatch, replay: Optional[SourceBatch],
                          cfg: PriorConfig, draws=None, seed=0, decode_labels: bool = True) -> LossReport:
    """Two-source ELBO (current + replay) plus class and task cross-entropies.

    ``draws`` may be one ``ElboDraws`` shared by both sources or a pair.  With
    ``decode_labels`` the decoder sees the one-hot label instead of a sampled
    class code, which ties the generator's class input to real classes (replay
    pseudo-labels depend on that).
    """
    gen = _rng(seed)
    terms: dict = {}
    objective = 0
    for i, (_, src) in enumerate(_sources(current, replay)):
        if src.y is None or src.task is None:
            raise ValueError("supervised dreaming needs class and task labels on every source")
        d = _draws_for(len(src), cfg, bundle, _split_draws(draws, i), gen)
        parts = _elbo_parts(bundle, src.x, cfg, d, labels=src.y if decode_labels else None)
        elbo = parts["recon"] - parts["kl_z"] - parts["kl_a"] - parts["kl_c"]
        ce_c = _ce(parts["c_logits"], src.y)
        ce_a = _ce(parts["a_logits"], src.task)
        for k in ("recon", "kl_z", "kl_a", "kl_c"):
            _accumulate(terms, k, parts[k])
        _accumulate(terms, "ce_c", ce_c)
        _accumulate(terms, "ce_a", ce_a)
        _accumulate(terms, "total", elbo)
        objective = objective - elbo + ce_c + ce_a
    report = LossReport(objective, terms)
    report.check_finite("in supervised dreaming loss")
    return report


def semi_supervised_loss(bundle: ModelBundle, labelled: Sequence[SourceBatch], unlabelled: Optional[SourceBatch],
                         cfg: PriorConfig, weights: LossWeights, draws=None, seed=0) -> LossReport:
    """Labelled two-source ELBO + ``beta`` * unlabelled ELBO + ``alpha`` * labelled class cross-entropy.

    ``labelled`` lists the labelled sources (current labelled data and, from
    the second task on, pseudo-labelled replay).  On labelled data the decoder
    receives the label instead of a sampled class code.
    """
    if weights.beta < 0:
        raise ValueError("beta must be non-negative")
    gen = _rng(seed)
    terms: dict = {}
    objective = 0
    labelled_elbo = 0
    for i, src in enumerate(s for s in labelled if s is not None and len(s) > 0):
        d = _draws_for(len(src), cfg, bundle, _split_draws(draws, i), gen)
        parts = _elbo_parts(bundle, src.x, cfg, d, labels=src.y)
        # the label is observed, so its prior log-probability replaces the class KL
        log_py = torch.as_tensor(cfg.class_probs, dtype=src.x.dtype).log()[_as_onehot_or_index(
            src.y, bundle.arch.num_classes)].mean()
        elbo = parts["recon"] - parts["kl_z"] - parts["kl_a"] + log_py
        ce_c = _ce(parts["c_logits"], src.y)
        ce_a = _ce(parts["a_logits"], src.task) if src.task is not None else 0
        for k in ("recon", "kl_z", "kl_a"):
            _accumulate(terms, k, parts[k])
        _accumulate(terms, "log_py", log_py)
        _accumulate(terms, "ce_c", ce_c)
        _accumulate(terms, "ce_a", ce_a)
        labelled_elbo = labelled_elbo + elbo
        objective = objective - elbo + weights.alpha * ce_c + ce_a
    terms["elbo_labelled"] = labelled_elbo
    unlabelled_elbo = 0
    if unlabelled is not None and len(unlabelled) > 0 and weights.beta > 0:
        d = _draws_for(len(unlabelled), cfg, bundle, _split_draws(draws, len(labelled)), gen)
        parts = _elbo_parts(bundle, unlabelled.x, cfg, d)
        unlabelled_elbo = parts["recon"] - parts["kl_z"] - parts["kl_a"] - parts["kl_c"]
        objective = objective - weights.beta * unlabelled_elbo
    terms["elbo_unlabelled"] = unlabelled_elbo
    terms["total"] = labelled_elbo + weights.beta * unlabelled_elbo
    report = LossReport(objective, {k: torch.as_tensor(v) for k, v in terms.items()})
    report.check_finite("in semi-supervised loss")
    return report


def unsup_dream_loss(bundle: ModelBundle, current: SourceBatch, replay: Optional[SourceBatch], cfg: PriorConfig,
                     weights: LossWeights, step: int = 0, total_steps: int = 1, draws=None, seed=0) -> LossReport:
    """Two-source ELBO of the unconditional model (generator sees only ``z`` and ``a``).

    With ``weights.disentangle`` the KL on ``z`` is replaced by
    ``gamma * |KL - C(step)|`` with ``C`` ramped linearly over the task.
    """
    if weights.gamma < 0:
        raise ValueError("gamma must be non-negative")
    gen = _rng(seed)
    capacity = weights.capacity(step, total_steps)
    terms: dict = {}
    objective = 0
    for i, (_, src) in enumerate(_sources(current, replay)):
        d = _draws_for(len(src), cfg, bundle, _split_draws(draws, i), gen)
        parts = _elbo_parts(bundle, src.x, cfg, d, drop_class=True)
        kl_z_term = capacity_penalty(parts["kl_z"], weights.gamma, capacity) if weights.disentangle else parts["kl_z"]
        elbo = parts["recon"] - kl_z_term - parts["kl_a"]
        ce_a = _ce(parts["a_logits"], src.task) if src.task is not None else 0
        for k in ("recon", "kl_z", "kl_a"):
            _accumulate(terms, k, parts[k])
        _accumulate(terms, "kl_z_term", kl_z_term)
        _accumulate(terms, "ce_a", ce_a)
        _accumulate(terms, "total", elbo)
        objective = objective - elbo + ce_a
    terms["capacity"] = torch.tensor(capacity)
    report = LossReport(objective, {k: torch.as_tensor(v) for k, v in terms.items()})
    report.check_finite("in unsupervised dreaming loss")
    return report
