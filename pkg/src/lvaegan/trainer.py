"""Wake/dreaming optimisation over a sequence of tasks.

Each mini-batch runs two phases.  The *wake* phase takes ``n_critic`` critic
steps and one generator step on the Wasserstein loss, with the real side drawn
from current data mixed with replay.  The *dreaming* phase takes one joint
step on the mode's ELBO objective over the generator and the three inference
networks.  Between tasks the generator is snapshotted and the domain code
grows by one unit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import ImageSet, Task, TaskStream, make_semi_split
from .latent import DEFAULT_TEMPERATURE, PriorConfig, sample_prior_codes
from .losses import (
    LossWeights,
    NonFiniteLossError,
    SourceBatch,
    class_consistency_loss,
    critic_loss,
    dream_loss_supervised,
    generator_loss,
    semi_supervised_loss,
    unsup_dream_loss,
)
from .nets import ArchitectureSpec, ModelBundle, save_bundle
from .replay import (
    ReplayBatchSpec,
    ReplaySnapshot,
    build_snapshot,
    default_replay_fraction,
    domain_label,
    mix_batches,
    pseudo_label,
    sample_replay,
    save_snapshot,
)

log = logging.getLogger(__name__)

MODES = ("supervised", "semi", "unsupervised")
REPLAY_KINDS = ("generative", "none", "buffer")
REPLAY_LABELS = ("code", "classifier")


class TrainingAborted(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"training aborted: {record.get('error', 'non-finite loss')}")
        self.record = record


@dataclass
class TrainConfig:
    mode: str = "supervised"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epochs_per_task: int = 10
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    replay: str = "generative"
    # how replayed samples get class labels: their class code, or the snapshot's frozen classifier
    replay_labels: str = "code"
    # None: (t - 1) / t at task t
    replay_fraction: Optional[float] = None
    buffer_per_task: int = 500
    n_labelled: Optional[int] = None
    max_steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.replay not in REPLAY_KINDS:
            raise ValueError(f"replay must be one of {REPLAY_KINDS}, got {self.replay!r}")
        if self.replay_labels not in REPLAY_LABELS:
            raise ValueError(f"replay_labels must be one of {REPLAY_LABELS}, got {self.replay_labels!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "semi" and self.n_labelled is None:
            raise ValueError("semi mode needs n_labelled")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def fan_out_seeds(master: int) -> dict:
    """Independent per-purpose seeds derived from one master seed."""
    names = ("init", "data", "train", "expand", "eval")
    children = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


@dataclass
class TrainState:
    bundle: ModelBundle
    prior: PriorConfig
    cfg: TrainConfig
    seeds: dict
    rng: torch.Generator
    task_index: int = 0  # 1-based index of the task being / last trained
    snapshot: Optional[ReplaySnapshot] = None
    snapshots: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0  # global epoch counter across tasks
    in_epoch: bool = False
    losses: list = field(default_factory=list)
    buffer: list = field(default_factory=list)
    task_names: list = field(default_factory=list)

    def draw_seed(self) -> int:
        return int(torch.randint(0, 2**62, (1,), generator=self.rng))


def init_state(arch: ArchitectureSpec, cfg: TrainConfig) -> TrainState:
    seeds = fan_out_seeds(cfg.seed)
    if (cfg.mode == "unsupervised") == arch.conditional:
        raise ValueError("unsupervised mode needs an unconditional architecture and vice versa")
    bundle = ModelBundle(arch, seed=seeds["init"])
    prior = PriorConfig(arch.dim_z, arch.num_classes, arch.num_domains, temperature=cfg.temperature)
    rng = torch.Generator()
    rng.manual_seed(seeds["train"])
    return TrainState(bundle, prior, cfg, seeds, rng)


class _Optimizers:
    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        kw = dict(lr=cfg.lr, betas=cfg.betas)
        self.critic = torch.optim.Adam(bundle.critic.parameters(), **kw)
        self.generator = torch.optim.Adam(bundle.generator.parameters(), **kw)
        vae_params = [p for name, ps in bundle.groups().items() if name != "critic" for p in ps]
        self.vae = torch.optim.Adam(vae_params, **kw)


def _replay_batch(state: TrainState, n: int):
    """``(x, y, task)`` replay tensors for one step (empty tuple entries when no replay)."""
    cfg = state.cfg
    if n == 0:
        return None, None, None
    if cfg.replay == "generative":
        snap = state.snapshot
        x, codes = sample_replay(snap, n, state.draw_seed())
        y = pseudo_label(codes) if codes.c is not None else None
        if y is not None and cfg.replay_labels == "classifier" and snap.class_head is not None:
            with torch.no_grad():
                y = snap.class_head(x).argmax(1)
        return x, y, domain_label(codes)
    if cfg.replay == "buffer":
        xs = torch.cat([b[0] for b in state.buffer])
        ys = torch.cat([b[1] for b in state.buffer])
        ts = torch.cat([b[2] for b in state.buffer])
        idx = torch.randint(0, len(xs), (n,), generator=state.rng)
        return xs[idx], ys[idx], ts[idx]
    return None, None, None


def _n_replay(state: TrainState, n_real: int) -> int:
    cfg = state.cfg
    t = state.task_index
    if t < 2 or cfg.replay == "none":
        return 0
    rho = cfg.replay_fraction if cfg.replay_fraction is not None else default_replay_fraction(t)
    if rho >= 1.0:
        return n_real
    return int(round(n_real * rho / (1.0 - rho)))


def _wake(state: TrainState, opt: _Optimizers, real_x: torch.Tensor) -> dict:
    b = state.bundle
    w = state.cfg.weights
    conditional = b.arch.conditional
    n = len(real_x)
    d_loss = gp = None
    for _ in range(w.n_critic):
        codes = sample_prior_codes(n, state.prior, state.rng, conditional=conditional)
        with torch.no_grad():
            fake = b.generator(codes.z, codes.a, codes.c)
        d_loss, gp = critic_loss(b.critic, real_x, fake, w.gp_lambda, seed=state.rng)
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("critic loss is non-finite", {"d_loss": float(d_loss.detach())})
        b.zero_grad(set_to_none=True)
        d_loss.backward()
        opt.critic.step()
    codes = sample_prior_codes(n, state.prior, state.rng, conditional=conditional)
    fake = b.generator(codes.z, codes.a, codes.c)
    g_loss = generator_loss(b.critic, fake)
    total = g_loss
    g_class = 0.0
    if conditional and w.class_consistency > 0:
        cc = class_consistency_loss(b.class_head, fake, codes.c)
        total = g_loss + w.class_consistency * cc
        g_class = float(cc.detach())
    if not torch.isfinite(total):
        raise NonFiniteLossError("generator loss is non-finite", {"g_loss": float(g_loss.detach()), "g_class": g_class})
    b.zero_grad(set_to_none=True)
    total.backward()
    # the classifier receives gradients here but only the generator is stepped
    opt.generator.step()
    b.zero_grad(set_to_none=True)
    d, g, p = float(d_loss.detach()), float(g_loss.detach()), float(gp.detach())
    return {"d_loss": d, "g_loss": g, "gp": p, "g_class": g_class, "w_estimate": -(d - w.gp_lambda * p)}


def _dream(state: TrainState, opt: _Optimizers, current: SourceBatch, replay: Optional[SourceBatch],
           labelled: Optional[SourceBatch], step_in_task: int, steps_in_task: int) -> dict:
    b = state.bundle
    cfg = state.cfg
    seed = state.draw_seed()
    if cfg.mode == "supervised":
        report = dream_loss_supervised(b, current, replay, state.prior, seed=seed)
    elif cfg.mode == "semi":
        report = semi_supervised_loss(b, [labelled, replay], current, state.prior, cfg.weights, seed=seed)
    else:
        report = unsup_dream_loss(b, current, replay, state.prior, cfg.weights, step_in_task, steps_in_task, seed=seed)
    b.zero_grad(set_to_none=True)
    report.objective.backward()
    opt.vae.step()
    b.zero_grad(set_to_none=True)
    return {f"dream_{k}" if k == "objective" else k: v for k, v in report.scalars().items()}


def train_step(state: TrainState, opt, real: SourceBatch, labelled: Optional[SourceBatch] = None,
               step_in_task: int = 0, steps_in_task: int = 1, phases=("wake", "dream")) -> dict:
    """One wake + dreaming iteration on a batch of current-task data."""
    cfg = state.cfg
    n_rep = _n_replay(state, len(real))
    rx, ry, rt = _replay_batch(state, n_rep)
    spec = ReplayBatchSpec(len(real) + n_rep, n_rep / (len(real) + n_rep), seed=state.draw_seed())
    mixed = mix_batches((real.x, real.y, real.task), (rx, ry, rt), spec)
    record = {"task": state.task_index, "epoch": state.epoch, "step": state.step, "n_replay": n_rep}
    if "wake" in phases:
        record.update(_wake(state, opt, mixed.x))
    if "dream" in phases:
        replay = mixed.part(replay=True) if n_rep else None
        current = mixed.part(replay=False)
        if cfg.mode == "semi":
            current.y = None
        record.update(_dream(state, opt, current, replay, labelled, step_in_task, steps_in_task))
    state.step += 1
    return record


def _current_batches(task: Task, cfg: TrainConfig, epoch_seed: int, split):
    """Yield ``(real, labelled)`` pairs of ``SourceBatch`` for one epoch."""
    tid = task.index
    data = task.train
    if split is None:
        order = np.random.default_rng(epoch_seed).permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            sub = data.subset(order[s : s + cfg.batch_size])
            yield SourceBatch(sub.x, sub.y, torch.full((len(sub),), tid)), None
        return
    lab, unl = split.apply(data)
    rng = np.random.default_rng(epoch_seed)
    main = unl if len(unl) > 0 else lab
    order = rng.permutation(len(main))
    lab_order = rng.permutation(len(lab))
    pos = 0
    for s in range(0, len(order), cfg.batch_size):
        sub = main.subset(order[s : s + cfg.batch_size])
        take = np.take(lab_order, np.arange(pos, pos + cfg.batch_size), mode="wrap")
        pos += cfg.batch_size
        ls = lab.subset(take)
        yield (SourceBatch(sub.x, None, torch.full((len(sub),), tid)),
               SourceBatch(ls.x, ls.y, torch.full((len(ls),), tid)))


def train_task(state: TrainState, task: Task, hooks: Sequence[Callable] = (), split=None) -> TrainState:
    """Train on one task for ``cfg.epochs_per_task`` epochs.

    ``hooks`` are called as ``hook(state, task, epoch_in_task)`` after every epoch.
    """
    cfg = state.cfg
    if len(task.train) == 0:
        raise ValueError(f"task {task.name!r} has no training data")
    if state.task_index >= 2 and cfg.replay == "generative" and state.snapshot is None:
        raise RuntimeError("task >= 2 needs a replay snapshot")
    if cfg.mode == "semi" and split is None:
        split = make_semi_split(task.train, cfg.n_labelled, seed=state.seeds["data"] + task.index)
    opt = _Optimizers(state.bundle, cfg)
    n_main = len(split.unlabelled) if split is not None and len(split.unlabelled) else (
        len(split.labelled) if split is not None else len(task.train))
    per_epoch = math.ceil(n_main / cfg.batch_size)
    if cfg.max_steps_per_epoch:
        per_epoch = min(per_epoch, cfg.max_steps_per_epoch)
    total = per_epoch * cfg.epochs_per_task
    k = 0
    for e in range(cfg.epochs_per_task):
        state.in_epoch = True
        epoch_seed = state.seeds["data"] + 7919 * state.epoch
        for i, (real, labelled) in enumerate(_current_batches(task, cfg, epoch_seed, split)):
            if i >= per_epoch:
                break
            try:
                rec = train_step(state, opt, real, labelled, k, total)
            except NonFiniteLossError as err:
                record = {"error": "non_finite_loss", "message": str(err), "terms": err.record,
                          "task": state.task_index, "epoch": state.epoch, "step": state.step}
                raise TrainingAborted(record) from err
            state.losses.append(rec)
            k += 1
        state.in_epoch = False
        for hook in hooks:
            hook(state, task, e)
        state.epoch += 1
    return state


def _fill_buffer(state: TrainState, task: Task):
    n = min(state.cfg.buffer_per_task, len(task.train))
    g = torch.Generator()
    g.manual_seed(state.seeds["data"] + 31 * task.index)
    idx = torch.randperm(len(task.train), generator=g)[:n]
    state.buffer.append((task.train.x[idx], task.train.y[idx], torch.full((n,), task.index)))


def begin_task(state: TrainState, run_dir: Optional[Path] = None) -> TrainState:
    """Snapshot the generator and grow the domain code before the next task."""
    t = state.task_index + 1
    if t >= 2:
        snap = build_snapshot(state.bundle, state.prior, t - 1)
        state.snapshot = snap
        state.snapshots.append(snap)
        if run_dir is not None:
            save_snapshot(snap, Path(run_dir) / "snapshots" / f"task_{t - 1}")
        state.prior = state.bundle.expand_domain(state.prior, seed=state.seeds["expand"] + t,
                                                 epoch_in_progress=state.in_epoch)
    state.task_index = t
    return state


def run_sequence(stream: TaskStream, arch: ArchitectureSpec, cfg: TrainConfig, run_dir=None,
                 hooks: Sequence[Callable] = (), state: Optional[TrainState] = None) -> TrainState:
    """Train over every task in order, snapshotting and checkpointing between tasks."""
    if len(stream) < 1:
        raise ValueError("need at least one task")
    state = state or init_state(arch, cfg)
    for task in stream:
        begin_task(state, run_dir)
        state.task_names.append(task.name)
        log.info("task %d (%s): %d training images", state.task_index, task.name, len(task.train))
        train_task(state, task, hooks)
        if cfg.replay == "buffer":
            _fill_buffer(state, task)
        if run_dir is not None:
            save_bundle(state.bundle, Path(run_dir) / "checkpoints" / f"task_{state.task_index}")
    return state
