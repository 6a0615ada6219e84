"""Numerical probes of the replay generalization bounds.

The central inequality compares the risk of a classifier ``h`` trained on
generated samples when it is evaluated on real data (``risk_real``) against
its risk on generated data::

    risk_real <= risk_generated + W(real, generated)
                 + sqrt(2 log(1 / delta_conf) / a') * (n_real**-0.5 + n_gen**-0.5) + D

where ``D`` is the combined error of the best joint classifier.  Everything
here is empirical: ``W`` comes from optimal transport between sample clouds
and ``D`` from a fixed sweep of probe classifiers.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .latent import LatentTriple, sample_prior_codes
from .probe import train_probe

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
EXACT_OT_MAX = 512
# Probe sweep used to approximate the combined error D: (kind, hidden, weight decay)
D_SWEEP = (("linear", (), 0.0), ("mlp", (64,), 0.0), ("mlp", (256,), 1e-4))
BOUNDS_COLUMNS = ("epoch", "risk1", "risk2", "W", "rhs", "holds", "task", "D", "confidence")


@dataclass
class SampleCloud:
    points: np.ndarray  # [n, s]
    labels: Optional[np.ndarray] = None
    source: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if self.points.ndim != 2 or len(self.points) < 1:
            raise ValueError("a cloud needs at least one point, shaped [n, s]")
        if not np.isfinite(self.points).all():
            raise ValueError("cloud has non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_images(cls, x, y=None, source: str = "") -> "SampleCloud":
        x = x.detach().cpu().reshape(len(x), -1).double().numpy()
        return cls(x, None if y is None else y.detach().cpu().numpy(), source)


def empirical_risk(h: Callable, cloud: SampleCloud) -> float:
    """Mean 0-1 loss of ``h`` (a callable returning labels) on a labelled cloud."""
    if cloud.labels is None:
        raise ValueError("empirical_risk needs a labelled cloud")
    pred = np.asarray(h(cloud.points))
    return float(np.mean(pred != cloud.labels))


def _subsample(points: np.ndarray, n: int, rng) -> np.ndarray:
    if len(points) == n:
        return points
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def exact_ot(a: np.ndarray, b: np.ndarray, order: int = 1) -> float:
    """Exact transport cost between equal-size clouds with uniform weights."""
    cost = cdist(a, b) ** order
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / len(a)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, order: int = 1, n_projections: int = 256, seed=0) -> float:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    per_dir = np.mean(np.abs(pa - pb) ** order, axis=0)
    return float(np.mean(per_dir) ** (1.0 / order))


def wasserstein_estimate(a, b, order: int = 1, seed=0, exact_max: int = EXACT_OT_MAX, n_projections: int = 256):
    """``(distance, estimator)`` between two clouds; see ``wasserstein_distance``."""
    a = a.points if isinstance(a, SampleCloud) else np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = b.points if isinstance(b, SampleCloud) else np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n = min(len(a), len(b))
    rng = np.random.default_rng(seed)
    a, b = _subsample(a, n, rng), _subsample(b, n, rng)
    if n <= exact_max:
        value, method = exact_ot(a, b, order) ** (1.0 / order), "exact"
    else:
        value, method = sliced_wasserstein(a, b, order, n_projections, seed), f"sliced[{n_projections}]"
    log.debug("wasserstein n=%d estimator=%s value=%.6g", n, method, value)
    return value, method


def wasserstein_distance(a, b, order: int = 1, seed=0, exact_max: int = EXACT_OT_MAX, n_projections: int = 256) -> float:
    """Order-``p`` Wasserstein distance between point clouds.

    Clouds are brought to equal size by subsampling the larger one.  Up to
    ``exact_max`` points the optimal assignment is solved exactly; beyond that
    a sliced estimate over ``n_projections`` random directions is used.
    """
    return wasserstein_estimate(a, b, order, seed, exact_max, n_projections)[0]


def confidence_term(n_real: int, n_gen: int, delta_conf: float = 0.05, a_prime: float = 1.0) -> float:
    _check_constants(delta_conf, a_prime)
    if n_real < 1 or n_gen < 1:
        raise ValueError("sample sizes must be >= 1")
    return math.sqrt(2.0 * math.log(1.0 / delta_conf) / a_prime) * (math.sqrt(1.0 / n_real) + math.sqrt(1.0 / n_gen))


def _check_constants(delta_conf, a_prime):
    if not 0.0 < delta_conf < 1.0:
        raise ValueError(f"delta_conf must lie in (0, 1), got {delta_conf}")
    if not 0.0 < a_prime < SQRT2:
        raise ValueError(f"a_prime must lie in (0, sqrt 2), got {a_prime}")


def theorem2_rhs(risk_generated: float, w: float, n_real, n_gen, delta_conf: float = 0.05,
                 a_prime: float = 1.0, d: float = 0.0) -> float:
    """Right-hand side of the single-task bound; ``n = inf`` drops the confidence term."""
    _check_constants(delta_conf, a_prime)
    if math.isinf(n_real) and math.isinf(n_gen):
        conf = 0.0
    else:
        conf = math.sqrt(2.0 * math.log(1.0 / delta_conf) / a_prime) * (
            math.sqrt(1.0 / n_real) + math.sqrt(1.0 / n_gen)
        )
    return risk_generated + w + conf + d


@dataclass
class BoundReport:
    risk_real: float
    risk_generated: float
    w: float
    d: float
    n_real: float
    n_gen: float
    delta_conf: float = 0.05
    a_prime: float = 1.0
    s_prime: Optional[float] = None  # recorded only; the sample-size precondition is not checked
    confidence: float = field(init=False)
    rhs: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        _check_constants(self.delta_conf, self.a_prime)
        self.rhs = theorem2_rhs(self.risk_generated, self.w, self.n_real, self.n_gen, self.delta_conf, self.a_prime, self.d)
        self.confidence = self.rhs - self.risk_generated - self.w - self.d
        self.holds = bool(self.risk_real <= self.rhs + 1e-9)

    @property
    def lhs(self) -> float:
        return self.risk_real


@dataclass
class AccumulatedReport:
    lhs: float
    rhs: float
    holds: bool
    per_task: list


def lemma2_accumulated(reports: Sequence[BoundReport]) -> AccumulatedReport:
    """Sum the per-task inequalities over all learned tasks."""
    if not reports:
        raise ValueError("need at least one per-task report")
    lhs = math.fsum(r.risk_real for r in reports)
    rhs = math.fsum(r.rhs for r in reports)
    return AccumulatedReport(lhs, rhs, bool(lhs <= rhs + 1e-9), list(reports))


@dataclass
class Lemma3Report:
    elbo: float
    w: float
    confidence: float
    d_star: float
    bound: float


def lemma3_gap(elbo_two_source: float, w: float, n, n_prime, delta_conf: float = 0.05, a_prime: float = 1.0,
               d_star: float = 0.0) -> Lemma3Report:
    """Certified lower bound: two-source ELBO minus distance, confidence and combined-error terms."""
    conf = theorem2_rhs(0.0, 0.0, n, n_prime, delta_conf, a_prime, 0.0)
    return Lemma3Report(elbo_two_source, w, conf, d_star, elbo_two_source - w - conf - d_star)


# ---------------------------------------------------------------- probes on models


def _probe_predictor(probe):
    def h(points):
        x = torch.as_tensor(points, dtype=torch.float32)
        return probe.predict(x.reshape(len(x), *probe_input_shape(probe))).numpy()

    return h


def probe_input_shape(probe):
    return probe.input_shape


def fit_probe(x: torch.Tensor, y: torch.Tensor, kind="mlp", hidden=(128,), epochs=5, seed=0, weight_decay=0.0,
              num_classes=10):
    probe = train_probe(x, y, num_classes=num_classes, kind=kind, hidden=hidden, epochs=epochs, seed=seed,
                        weight_decay=weight_decay)
    probe.input_shape = tuple(x.shape[1:])
    return probe


def combined_error(real_x, real_y, gen_x, gen_y, seed=0, sweep=D_SWEEP, epochs=5, num_classes=10) -> float:
    """Approximate ``min_h E(h(real)) + E(h(generated))`` by a fixed probe sweep on the union."""
    x = torch.cat([real_x, gen_x])
    y = torch.cat([real_y, gen_y])
    real = SampleCloud.from_images(real_x, real_y)
    gen = SampleCloud.from_images(gen_x, gen_y)
    best = math.inf
    for i, (kind, hidden, wd) in enumerate(sweep):
        probe = fit_probe(x, y, kind=kind, hidden=hidden, epochs=epochs, seed=seed + i, weight_decay=wd,
                          num_classes=num_classes)
        h = _probe_predictor(probe)
        best = min(best, empirical_risk(h, real) + empirical_risk(h, gen))
    return best


def bound_report(h_probe, real: SampleCloud, generated: SampleCloud, w: float, d: float,
                 delta_conf: float = 0.05, a_prime: float = 1.0) -> BoundReport:
    h = _probe_predictor(h_probe)
    return BoundReport(empirical_risk(h, real), empirical_risk(h, generated), w, d, len(real), len(generated),
                       delta_conf, a_prime)


@torch.no_grad()
def sample_domain(generator, prior, domain: int, n: int, seed):
    """Generate ``n`` images for one domain with class codes from the prior; returns ``(x, labels)``."""
    codes = sample_prior_codes(n, prior, seed, conditional=generator.arch.conditional)
    a = torch.zeros_like(codes.a)
    a[:, domain] = 1.0
    x = generator(codes.z, a, codes.c)
    y = codes.c.argmax(1) if codes.c is not None else torch.zeros(n, dtype=torch.long)
    return x, y


def generator_sampler(generator, prior, domain: int):
    return lambda n, seed: sample_domain(generator, prior, domain, n, seed)


@dataclass
class RiskConfig:
    n_train_gen: int = 2000
    n_eval_gen: int = 2000
    n_real: Optional[int] = None  # None: the full test set of the tracked task
    n_ot: int = EXACT_OT_MAX
    n_d: int = 1000
    probe_kind: str = "mlp"
    probe_hidden: tuple = (128,)
    probe_epochs: int = 5
    delta_conf: float = 0.05
    a_prime: float = 1.0
    seed: int = 0


def measure_risks(sampler: Callable, real_test, real_train, cfg: RiskConfig = RiskConfig(), num_classes=10) -> BoundReport:
    """Train ``h`` on generated samples and measure every quantity of the single-task bound.

    ``sampler(n, seed) -> (x, y)`` produces labelled generated data;
    ``real_test``/``real_train`` are ``ImageSet``-like objects with ``x``, ``y``.
    ``risk_generated`` is measured on a fresh generated draw, not the training draw.
    """
    s = cfg.seed
    gx, gy = sampler(cfg.n_train_gen, s)
    h = fit_probe(gx, gy, kind=cfg.probe_kind, hidden=cfg.probe_hidden, epochs=cfg.probe_epochs, seed=s,
                  num_classes=num_classes)
    ex, ey = sampler(cfg.n_eval_gen, s + 1)
    rx, ry = real_test.x, real_test.y
    if cfg.n_real is not None and cfg.n_real < len(rx):
        idx = torch.from_numpy(np.sort(np.random.default_rng(s).permutation(len(rx))[: cfg.n_real]))
        rx, ry = rx[idx], ry[idx]
    real = SampleCloud.from_images(rx, ry, "real")
    gen = SampleCloud.from_images(ex, ey, "generated")
    w = wasserstein_distance(real, gen, seed=s, exact_max=cfg.n_ot) if min(len(real), len(gen)) <= cfg.n_ot else \
        wasserstein_distance(_cloud_head(real, cfg.n_ot, s), _cloud_head(gen, cfg.n_ot, s + 1), seed=s, exact_max=cfg.n_ot)
    dn = min(cfg.n_d, len(real_train.x))
    d = combined_error(real_train.x[:dn], real_train.y[:dn], gx[:dn], gy[:dn], seed=s, num_classes=num_classes)
    return bound_report(h, real, gen, w, d, cfg.delta_conf, cfg.a_prime)


def _cloud_head(cloud: SampleCloud, n: int, seed) -> SampleCloud:
    idx = np.sort(np.random.default_rng(seed).permutation(len(cloud))[:n])
    return SampleCloud(cloud.points[idx], None if cloud.labels is None else cloud.labels[idx], cloud.source)


class RiskTracker:
    """Per-epoch hook recording the single-task bound for one tracked task (default: the first).

    Generated data for the tracked task come from a frozen copy of the live
    generator with the domain code fixed to that task.
    """

    def __init__(self, stream, task_index: int = 0, cfg: RiskConfig = RiskConfig(), sampler_factory=None):
        self.stream = stream
        self.task_index = task_index
        self.cfg = cfg
        self.sampler_factory = sampler_factory
        self.rows: list = []

    def __call__(self, state, task, epoch_in_task):
        tracked = self.stream[self.task_index]
        if state.task_index - 1 < self.task_index:
            return
        if self.sampler_factory is not None:
            sampler = self.sampler_factory(state)
        else:
            gen = state.bundle.frozen_copy().generator
            sampler = generator_sampler(gen, state.prior, self.task_index)
        cfg = RiskConfig(**{**asdict(self.cfg), "seed": self.cfg.seed + state.epoch})
        rep = measure_risks(sampler, tracked.test, tracked.train, cfg, num_classes=tracked.num_classes)
        self.rows.append({
            "epoch": state.epoch, "risk1": rep.risk_real, "risk2": rep.risk_generated, "W": rep.w,
            "rhs": rep.rhs, "holds": int(rep.holds), "task": state.task_index, "D": rep.d,
            "confidence": rep.confidence,
        })

    def holds_fraction(self) -> float:
        return float(np.mean([r["holds"] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path):
        write_bounds_csv(self.rows, path)


def write_bounds_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BOUNDS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in BOUNDS_COLUMNS})


def read_bounds_csv(path) -> list:
    with open(path) as f:
        return list(csv.DictReader(f))


def brute_force_ot(a: np.ndarray, b: np.ndarray, order: int = 1) -> float:
    """Exhaustive minimum over all permutations; only for tiny clouds."""
    n = len(a)
    if n > 8:
        raise ValueError("brute force is limited to 8 points")
    cost = cdist(a, b) ** order
    return min(math.fsum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


class EmpiricalSampler:
    """A "perfect generator": hands out real images without replacement.

    Successive calls draw consecutive chunks of one fixed permutation, so the
    training and evaluation draws of ``measure_risks`` never share an image.
    """

    def __init__(self, data, seed: int = 0):
        self.data = data
        self.order = np.random.default_rng(seed).permutation(len(data.x))
        self.cursor = 0

    def __call__(self, n: int, seed=None):
        if self.cursor + n > len(self.order):
            raise ValueError(f"pool exhausted: {len(self.order) - self.cursor} images left, {n} requested")
        idx = torch.from_numpy(self.order[self.cursor : self.cursor + n])
        self.cursor += n
        return self.data.x[idx], self.data.y[idx]
