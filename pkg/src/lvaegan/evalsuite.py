"""Evaluation protocols: reconstruction, accuracies, interpolation, traversal, forgetting."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import linalg

from .latent import LatentTriple, harden
from .probe import train_probe
from .replay import ReplaySnapshot, pseudo_label, sample_replay

METRIC_COLUMNS = ("run", "task", "epoch", "name", "value", "seed", "artifact")
CONVENTIONS = ("image_sum", "pixel")


@dataclass(frozen=True)
class MetricRecord:
    run: str
    task: int
    epoch: int
    name: str
    value: float
    seed: int = 0
    artifact: str = ""  # path relative to the run directory, if the metric produced a file

    @property
    def key(self):
        return (self.run, self.task, self.epoch, self.name)


class MetricsLog:
    """Append-only metric table; ``(run, task, epoch, name)`` may appear once."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list = []
        self._keys: set = set()
        if self.path is not None and self.path.exists():
            for r in read_metrics(self.path):
                self._add(r)

    def _add(self, rec: MetricRecord):
        if rec.key in self._keys:
            raise ValueError(f"duplicate metric record {rec.key}")
        self._keys.add(rec.key)
        self.records.append(rec)

    def append(self, rec: MetricRecord) -> MetricRecord:
        self._add(rec)
        if self.path is not None:
            new = not self.path.exists()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", newline="") as f:
                w = csv.writer(f)
                if new:
                    w.writerow(METRIC_COLUMNS)
                w.writerow([rec.run, rec.task, rec.epoch, rec.name, repr(float(rec.value)), rec.seed, rec.artifact])
        return rec

    def log(self, run, task, epoch, name, value, seed=0, artifact="") -> MetricRecord:
        return self.append(MetricRecord(str(run), int(task), int(epoch), name, float(value), int(seed), str(artifact)))

    def select(self, name: str, task: Optional[int] = None) -> list:
        return [r for r in self.records if r.name == name and (task is None or r.task == task)]


def read_metrics(path) -> list:
    with open(path) as f:
        return [
            MetricRecord(r["run"], int(r["task"]), int(r["epoch"]), r["name"], float(r["value"]), int(r["seed"]),
                         r.get("artifact", ""))
            for r in csv.DictReader(f)
        ]


# ---------------------------------------------------------------- scalar metrics


def squared_errors(x: torch.Tensor, recon: torch.Tensor) -> np.ndarray:
    """Per-pixel squared errors in float64, shape ``[N, P]``."""
    if x.shape != recon.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(recon.shape)}")
    d = x.detach().double().reshape(len(x), -1).numpy() - recon.detach().double().reshape(len(x), -1).numpy()
    return d * d


def mse_from_errors(sq: np.ndarray, convention: str = "image_sum") -> float:
    """Exactly rounded mean of squared errors (``math.fsum``) under one of two normalizations.

    ``image_sum``: summed over pixels, averaged over images.
    ``pixel``: averaged over every pixel.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    total = math.fsum(sq.ravel().tolist())
    n, p = sq.shape
    return total / n if convention == "image_sum" else total / (n * p)


def reconstruction_mse(bundle, x: torch.Tensor, convention: str = "image_sum", batch_size: int = 1024) -> float:
    """Reconstruction error using the deterministic codes (``mu``, hardened ``a`` and ``c``)."""
    recon = torch.cat([bundle.reconstruct(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    return mse_from_errors(squared_errors(x, recon), convention)


@torch.no_grad()
def classifier_accuracy(bundle, x: torch.Tensor, y: torch.Tensor, batch_size: int = 1024) -> float:
    pred = torch.cat([bundle.classify(x[i : i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return float((pred == y).double().mean())


@torch.no_grad()
def task_inference_accuracy(bundle, test_sets: Sequence[torch.Tensor]) -> dict:
    """Accuracy of the inferred domain on each task's images (task ``i`` has domain ``i``)."""
    out = {}
    hits = total = 0
    for i, x in enumerate(test_sets):
        pred = bundle.infer_domain(x).argmax(1)
        h = int((pred == i).sum())
        out[i] = h / len(x)
        hits += h
        total += len(x)
    out["overall"] = hits / total
    return out


def replay_classifier_accuracy(source, test_sets: Sequence, n: int = 5000, seed: int = 0, epochs: int = 5,
                               num_classes: int = 10) -> dict:
    """Train the fixed conv probe on ``n`` generated (image, pseudo-label) pairs; test accuracy per task.

    ``source`` is a ``ReplaySnapshot`` or a callable ``(n, seed) -> (x, y)``.
    ``test_sets`` are ``(x, y)`` pairs or objects with ``x`` and ``y``.
    """
    if isinstance(source, ReplaySnapshot):
        if not source.generator.arch.conditional:
            raise ValueError("replay accuracy needs class codes; this snapshot is unconditional")
        x, codes = sample_replay(source, n, seed)
        y = pseudo_label(codes)
    else:
        x, y = source(n, seed)
    probe = train_probe(x, y, num_classes=num_classes, kind="conv", epochs=epochs, seed=seed)
    out = {}
    for i, t in enumerate(test_sets):
        tx, ty = (t.x, t.y) if hasattr(t, "x") else t
        out[i] = float((probe.predict(tx) == ty).double().mean())
    return out


def fid_proxy(real: torch.Tensor, generated: torch.Tensor, probe) -> float:
    """Fréchet (Gaussian 2-Wasserstein squared) distance between probe features of two image sets."""
    a = probe.embed(real).double().numpy()
    b = probe.embed(generated).double().numpy()
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2.0 * covmean))


# ---------------------------------------------------------------- latent walks


@torch.no_grad()
def interpolate(bundle, x1: torch.Tensor, x2: torch.Tensor, steps: int) -> torch.Tensor:
    """Decode a straight path between the codes of two images; returns ``[steps, C, H, W]``.

    ``z`` moves linearly between the encoder means; the domain and class codes
    move linearly on the simplex between their hardened endpoints.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    codes = bundle.mean_codes(torch.stack([_single(x1), _single(x2)]))
    t = torch.linspace(0.0, 1.0, steps, dtype=codes.z.dtype)[:, None]
    t[0], t[-1] = 0.0, 1.0
    path = lambda v: None if v is None else (1.0 - t) * v[0:1] + t * v[1:2]
    return bundle.decode(LatentTriple(path(codes.z), path(codes.a), path(codes.c)))


def traverse_grid(lo: float = -3.0, hi: float = 3.0, steps: int = 7) -> torch.Tensor:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return torch.tensor([lo])
    g = torch.tensor([lo + (hi - lo) * i / (steps - 1) for i in range(steps)])
    g[-1] = hi
    return g


@torch.no_grad()
def traverse(bundle, x: torch.Tensor, dim: int, lo: float = -3.0, hi: float = 3.0, steps: int = 7,
             values: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Vary ``z[dim]`` over ``lo..hi`` (or explicit ``values``), all other codes fixed at those of ``x``."""
    if not 0 <= dim < bundle.arch.dim_z:
        raise ValueError(f"dim must lie in [0, {bundle.arch.dim_z}), got {dim}")
    grid = torch.as_tensor(values, dtype=torch.float32) if values is not None else traverse_grid(lo, hi, steps)
    codes = bundle.mean_codes(_single(x)[None])
    k = len(grid)
    z = codes.z.repeat(k, 1)
    z[:, dim] = grid.to(z.dtype)
    rep = lambda v: None if v is None else v.repeat(k, 1)
    return bundle.decode(LatentTriple(z, rep(codes.a), rep(codes.c)))


def _single(x):
    return x[0] if x.dim() == 4 else x


# ---------------------------------------------------------------- forgetting


def forgetting_curve(records: Sequence[MetricRecord], name: str = "accuracy") -> dict:
    """``{epoch: {task: value}}`` for one metric; raises if the epoch x task grid has holes."""
    rows = [r for r in records if r.name == name]
    epochs = sorted({r.epoch for r in rows})
    tasks = sorted({r.task for r in rows})
    table = {e: {} for e in epochs}
    for r in rows:
        table[r.epoch][r.task] = r.value
    missing = [(e, t) for e in epochs for t in tasks if t not in table[e]]
    if missing:
        raise ValueError(f"incomplete forgetting grid, missing {missing[:5]}")
    return table


def write_forgetting_csv(table: dict, path):
    tasks = sorted({t for row in table.values() for t in row})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "task", "value"])
        for e in sorted(table):
            for t in tasks:
                w.writerow([e, t, repr(float(table[e][t]))])


def drop_from_peak(table: dict, task: int, before_epoch: int) -> float:
    """Peak accuracy of ``task`` over epochs ``< before_epoch`` minus its final accuracy."""
    peak = max(row[task] for e, row in table.items() if e < before_epoch)
    return peak - table[max(table)][task]


# ---------------------------------------------------------------- images


def save_grid(images: torch.Tensor, path, nrow: Optional[int] = None) -> Path:
    """Write ``[N, C, H, W]`` images in ``[0, 1]`` as one 8-bit PNG (grayscale or RGB)."""
    n, c, h, w = images.shape
    nrow = nrow or n
    rows = math.ceil(n / nrow)
    canvas = np.zeros((rows * h, nrow * w, c), dtype=np.uint8)
    arr = (images.detach().clamp(0, 1).permute(0, 2, 3, 1).numpy() * 255.0).round().astype(np.uint8)
    for i in range(n):
        r, col = divmod(i, nrow)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = arr[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas[..., 0] if c == 1 else canvas).save(path)
    return path


# ---------------------------------------------------------------- training hook


class EvalHook:
    """Per-epoch evaluation: ``q_delta`` accuracy and reconstruction error on every task of the stream."""

    def __init__(self, stream, log: MetricsLog, run_id: str = "run", n_eval: Optional[int] = None, seed: int = 0):
        self.stream = stream
        self.log = log
        self.run_id = run_id
        self.n_eval = n_eval
        self.seed = seed

    def _test(self, task):
        x, y = task.test.x, task.test.y
        if self.n_eval is not None:
            x, y = x[: self.n_eval], y[: self.n_eval]
        return x, y

    def __call__(self, state, task, epoch_in_task):
        b = state.bundle
        for t in self.stream:
            x, y = self._test(t)
            if b.class_head is not None:
                self.log.log(self.run_id, t.index, state.epoch, "accuracy", classifier_accuracy(b, x, y), self.seed)
            self.log.log(self.run_id, t.index, state.epoch, "rec_image_sum", reconstruction_mse(b, x), self.seed)
