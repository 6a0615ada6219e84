"""Generative replay: frozen generator snapshots and mixed training batches."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .latent import LatentTriple, PriorConfig, _rng, harden, sample_prior_codes
from .nets import ClassHead, Generator, load_arch


@dataclass(frozen=True)
class ReplaySnapshot:
    """A frozen generator (plus priors) standing in for all tasks up to ``task_count``."""

    generator: Generator
    prior: PriorConfig
    task_count: int
    class_head: Optional[ClassHead] = None

    def sample(self, n: int, seed):
        return sample_replay(self, n, seed)


def _freeze(module):
    m = copy.deepcopy(module)
    m.requires_grad_(False)
    m.eval()
    return m


def build_snapshot(bundle, prior: PriorConfig, task_count: int, trained: bool = True) -> ReplaySnapshot:
    if not trained or task_count < 1:
        raise RuntimeError("cannot snapshot a model before any task has been trained")
    if prior.num_domains != bundle.arch.num_domains:
        raise ValueError(f"prior has K={prior.num_domains}, model has K={bundle.arch.num_domains}")
    head = _freeze(bundle.class_head) if bundle.class_head is not None else None
    return ReplaySnapshot(_freeze(bundle.generator), prior, int(task_count), head)


@torch.no_grad()
def sample_replay(snap: ReplaySnapshot, n: int, seed):
    """Draw ``n`` replay images; returns ``(images, codes)``.

    Codes come from the snapshot's priors, so the domain code ranges over the
    first ``task_count`` domains.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    codes = sample_prior_codes(n, snap.prior, seed, conditional=snap.generator.arch.conditional)
    return snap.generator(codes.z, codes.a, codes.c), codes


def pseudo_label(codes: LatentTriple) -> torch.Tensor:
    """Class labels of replay samples: the (hardened) class code they were generated from."""
    if codes.c is None:
        raise ValueError("unconditional replay has no class code to label with")
    return harden(codes.c).argmax(1)


def domain_label(codes: LatentTriple) -> torch.Tensor:
    return harden(codes.a).argmax(1)


@dataclass
class ReplayBatchSpec:
    size: int
    replay_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError(f"replay_fraction must lie in [0, 1], got {self.replay_fraction}")
        if self.size < 1:
            raise ValueError("size must be >= 1")

    @property
    def n_replay(self) -> int:
        # small slack so that rho = k / size yields exactly k
        return int(np.floor(self.replay_fraction * self.size + 1e-9))


@dataclass
class MixedBatch:
    x: torch.Tensor
    y: Optional[torch.Tensor]
    task: Optional[torch.Tensor]
    is_replay: torch.Tensor  # bool per sample

    def __len__(self):
        return self.x.shape[0]

    def part(self, replay: bool):
        from .losses import SourceBatch

        m = self.is_replay if replay else ~self.is_replay
        return SourceBatch(
            self.x[m],
            None if self.y is None else self.y[m],
            None if self.task is None else self.task[m],
        )


def _take(t, n):
    return None if t is None else t[:n]


def mix_batches(real: tuple, replay: tuple, spec: ReplayBatchSpec) -> MixedBatch:
    """Combine ``floor(rho * size)`` replay samples with ``size - that`` real ones, shuffled.

    ``real`` and ``replay`` are ``(x, y, task)`` tuples; ``y``/``task`` may be
    ``None``.  Sources shorter than their share contribute what they have.
    """
    rx, ry, rt = real
    px, py, pt = replay
    n_real_avail = 0 if rx is None else len(rx)
    n_rep_avail = 0 if px is None else len(px)
    if n_real_avail == 0 and n_rep_avail == 0:
        raise ValueError("both sources are empty")
    n_rep = min(spec.n_replay, n_rep_avail)
    n_real = min(spec.size - spec.n_replay, n_real_avail)
    xs, ys, ts, flags = [], [], [], []
    for (x, y, t), n, flag in (((rx, ry, rt), n_real, False), ((px, py, pt), n_rep, True)):
        if n == 0:
            continue
        xs.append(x[:n])
        ys.append(_take(y, n))
        ts.append(_take(t, n))
        flags.append(torch.full((n,), flag))
    perm = torch.randperm(sum(len(x) for x in xs), generator=_rng(spec.seed))
    cat = lambda parts: None if any(p is None for p in parts) else torch.cat(parts)[perm]
    return MixedBatch(torch.cat(xs)[perm], cat(ys), cat(ts), torch.cat(flags)[perm])


def default_replay_fraction(t: int) -> float:
    """``(t - 1) / t`` at task ``t`` (1-based): every task equally represented."""
    return (t - 1) / t


def save_snapshot(snap: ReplaySnapshot, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "generator.npz", **{k: v.numpy() for k, v in snap.generator.state_dict().items()})
    if snap.class_head is not None:
        np.savez(path / "class_head.npz", **{k: v.numpy() for k, v in snap.class_head.state_dict().items()})
    with open(path / "arch.yaml", "w") as f:
        yaml.safe_dump(snap.generator.arch.to_dict(), f, sort_keys=True)
    with open(path / "snapshot.yaml", "w") as f:
        yaml.safe_dump({"task_count": snap.task_count, "prior": snap.prior.to_dict()}, f, sort_keys=True)
    return path


def _load_state(module, file):
    with np.load(file) as data:
        module.load_state_dict({k: torch.from_numpy(data[k].copy()) for k in data.files})


def load_snapshot(path) -> ReplaySnapshot:
    path = Path(path)
    if not (path / "snapshot.yaml").exists():
        raise FileNotFoundError(f"no snapshot at {path}")
    arch = load_arch(path)
    with open(path / "snapshot.yaml") as f:
        meta = yaml.safe_load(f)
    gen = Generator(arch)
    _load_state(gen, path / "generator.npz")
    head = None
    if (path / "class_head.npz").exists():
        head = ClassHead(arch)
        _load_state(head, path / "class_head.npz")
    return ReplaySnapshot(_freeze(gen), PriorConfig.from_dict(meta["prior"]), int(meta["task_count"]),
                          _freeze(head) if head is not None else None)
