"""Task streams of small labelled image datasets.

On-disk layout (one directory per task, written by the importers below)::

    <root>/<task>/{train,test}/images.bin   uint8, row-major [count, H, W, C]
    <root>/<task>/{train,test}/labels.bin   uint8, [count]
    <root>/<task>/{train,test}/manifest.yaml
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

DATA_ENV = "LVAEGAN_DATA"


class DataError(RuntimeError):
    pass


def default_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


@dataclass
class ImageSet:
    x: torch.Tensor  # float32 [N, C, H, W] in [0, 1]
    y: torch.Tensor  # int64 [N]

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "ImageSet":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return ImageSet(self.x[idx], self.y[idx])


@dataclass
class Task:
    name: str
    train: ImageSet
    test: ImageSet
    num_classes: int = 10
    index: int = 0

    @property
    def image_shape(self) -> tuple:
        _, c, h, w = self.train.x.shape
        return (h, w, c)


@dataclass
class TaskStream:
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {t.image_shape for t in self.tasks}
        if len(shapes) > 1:
            raise DataError(f"inconsistent image shapes across tasks: {sorted(shapes)}")
        for i, t in enumerate(self.tasks):
            t.index = i

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def image_shape(self) -> tuple:
        return self.tasks[0].image_shape


@dataclass
class SemiSplit:
    labelled: np.ndarray
    unlabelled: np.ndarray
    seed: int

    def apply(self, data: ImageSet) -> tuple:
        return data.subset(self.labelled), data.subset(self.unlabelled)


# ---------------------------------------------------------------- writing / importing


def write_split(root, name: str, split: str, images: np.ndarray, labels: np.ndarray, num_classes: int = 10) -> Path:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim == 3:
        images = images[..., None]
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[0] != labels.shape[0]:
        raise DataError("image and label counts differ")
    d = Path(root) / name / split
    d.mkdir(parents=True, exist_ok=True)
    images.tofile(d / "images.bin")
    labels.tofile(d / "labels.bin")
    manifest = {
        "dtype": "uint8",
        "shape": list(images.shape),
        "count": int(images.shape[0]),
        "label_dtype": "uint8",
        "num_classes": int(num_classes),
    }
    with open(d / "manifest.yaml", "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return d


def read_idx(path) -> np.ndarray:
    """Read an IDX array (the classic MNIST archive format), optionally gzipped."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _hashes(images: np.ndarray) -> list:
    return [hashlib.blake2b(row.tobytes(), digest_size=16).hexdigest() for row in images.reshape(len(images), -1)]


def import_idx(root, name: str, train_images, train_labels, test_images, test_labels) -> Path:
    xtr, ytr = read_idx(train_images), read_idx(train_labels)
    xte, yte = read_idx(test_images), read_idx(test_labels)
    overlap = set(_hashes(xtr)) & set(_hashes(xte))
    if overlap:
        keep = [i for i, h in enumerate(_hashes(xte)) if h not in overlap]
        xte, yte = xte[keep], yte[keep]
    num_classes = int(max(ytr.max(), yte.max())) + 1
    write_split(root, name, "train", xtr, ytr, num_classes)
    write_split(root, name, "test", xte, yte, num_classes)
    return Path(root) / name


def _read_class_json(path: Path, side: int) -> np.ndarray:
    with open(path) as f:
        data = json.load(f)["data"]
    if data and isinstance(data[0], list):
        rows = [r for r in data if len(r) == side * side]
        arr = np.asarray(rows, dtype=np.float64)
    else:
        arr = np.asarray(data, dtype=np.float64).reshape(-1, side * side)
    if arr.max() <= 1.0:
        arr = arr * 255.0
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8).reshape(-1, side, side)


def import_class_json(root, name: str, src, test_per_class: int, train_per_class: Optional[int] = None,
                      seed: int = 0, side: int = 28) -> Path:
    """Import a directory of per-class JSON files (``0.json`` ... ``9.json``, key ``data``).

    Pixel rows are either one flat list or a list of per-image lists, in
    ``[0, 1]`` or ``[0, 255]``.  Exact duplicates are dropped before a
    class-stratified train/test split.
    """
    src = Path(src)
    files = sorted(src.glob("*.json"), key=lambda p: int(p.stem))
    if not files:
        raise DataError(f"no per-class JSON files in {src}")
    rng = np.random.default_rng(seed)
    parts = {"train": ([], []), "test": ([], [])}
    seen: set = set()
    for f in files:
        cls = int(f.stem)
        imgs = _read_class_json(f, side)
        keep = []
        for i, h in enumerate(_hashes(imgs)):
            if h not in seen:
                seen.add(h)
                keep.append(i)
        imgs = imgs[keep]
        perm = rng.permutation(len(imgs))
        te = perm[:test_per_class]
        tr = perm[test_per_class:]
        if train_per_class is not None:
            tr = tr[:train_per_class]
        for split, idx in (("train", np.sort(tr)), ("test", np.sort(te))):
            parts[split][0].append(imgs[idx])
            parts[split][1].append(np.full(len(idx), cls, dtype=np.uint8))
    num_classes = len(files)
    for split, (xs, ys) in parts.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        write_split(root, name, split, x, y, num_classes)
    return Path(root) / name


# ---------------------------------------------------------------- loading


def _read_split(d: Path):
    mpath = d / "manifest.yaml"
    if not mpath.exists():
        raise DataError(f"missing manifest {mpath}")
    with open(mpath) as f:
        m = yaml.safe_load(f)
    shape = tuple(m["shape"])
    try:
        images = np.fromfile(d / "images.bin", dtype=np.uint8)
        labels = np.fromfile(d / "labels.bin", dtype=np.uint8)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    if images.size != int(np.prod(shape)) or labels.size != m["count"]:
        raise DataError(f"{d}: file sizes do not match the manifest")
    return images.reshape(shape), labels.astype(np.int64), int(m.get("num_classes", labels.max() + 1))


def _to_tensor(images: np.ndarray, target_shape=None) -> torch.Tensor:
    x = torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    if target_shape is not None and tuple(x.shape[2:]) != tuple(target_shape):
        x = F.interpolate(x, size=tuple(target_shape), mode="area")
    return x.clamp_(0.0, 1.0)


def _resolve(name_or_dir, root) -> Path:
    p = Path(name_or_dir)
    if (p / "train" / "manifest.yaml").exists():
        return p
    p = Path(root if root is not None else default_root()) / str(name_or_dir)
    if not (p / "train" / "manifest.yaml").exists():
        raise DataError(f"task {name_or_dir!r} not found (looked in {p})")
    return p


def load_task(name_or_dir, root=None, target_shape: Optional[Sequence[int]] = None, n_train: Optional[int] = None,
              n_test: Optional[int] = None, seed: int = 0) -> Task:
    """Load one task; pixels scaled to ``[0, 1]``, optionally resized to ``(H, W)`` and subsampled."""
    d = _resolve(name_or_dir, root)
    xtr, ytr, k = _read_split(d / "train")
    xte, yte, _ = _read_split(d / "test")
    if set(_hashes(xtr)) & set(_hashes(xte)):
        raise DataError(f"{d}: train and test share images")
    rng = np.random.default_rng(seed)
    if n_train is not None and n_train < len(xtr):
        idx = np.sort(rng.permutation(len(xtr))[:n_train])
        xtr, ytr = xtr[idx], ytr[idx]
    if n_test is not None and n_test < len(xte):
        idx = np.sort(rng.permutation(len(xte))[:n_test])
        xte, yte = xte[idx], yte[idx]
    train = ImageSet(_to_tensor(xtr, target_shape), torch.from_numpy(ytr))
    test = ImageSet(_to_tensor(xte, target_shape), torch.from_numpy(yte))
    return Task(d.name, train, test, num_classes=k)


def load_stream(names: Sequence[str], root=None, **kwargs) -> TaskStream:
    return TaskStream([load_task(n, root=root, **kwargs) for n in names])


def checksum(data: ImageSet) -> str:
    h = hashlib.sha256()
    h.update(data.x.numpy().tobytes())
    h.update(data.y.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- splits and batches


def _balanced_quotas(counts: np.ndarray, n: int, rng) -> np.ndarray:
    """Per-class quotas summing to ``n``, as equal as class sizes allow (water-filling)."""
    quotas = np.zeros_like(counts)
    remaining = n
    active = [c for c in range(len(counts)) if counts[c] > 0]
    while remaining > 0 and active:
        share = remaining // len(active)
        if share == 0:
            for c in rng.permutation(active)[:remaining]:
                quotas[c] += 1
            break
        nxt = []
        for c in active:
            take = min(share, counts[c] - quotas[c])
            quotas[c] += take
            remaining -= take
            if quotas[c] < counts[c]:
                nxt.append(c)
        active = nxt
    return quotas


def make_semi_split(train: ImageSet, n_labelled: int, seed: int = 0, num_classes: Optional[int] = None) -> SemiSplit:
    """Class-balanced labelled subset of size ``n_labelled``; the rest is unlabelled."""
    n = len(train)
    if n_labelled > n:
        raise ValueError(f"n_labelled={n_labelled} exceeds the {n} training samples")
    if n_labelled < 0:
        raise ValueError("n_labelled must be non-negative")
    y = train.y.numpy()
    k = num_classes or int(y.max()) + 1
    rng = np.random.default_rng(seed)
    counts = np.bincount(y, minlength=k)
    quotas = _balanced_quotas(counts, n_labelled, rng)
    labelled = []
    for c in range(k):
        members = np.flatnonzero(y == c)
        labelled.append(rng.permutation(members)[: quotas[c]])
    labelled = np.sort(np.concatenate(labelled)).astype(np.int64)
    mask = np.ones(n, dtype=bool)
    mask[labelled] = False
    return SemiSplit(labelled, np.flatnonzero(mask).astype(np.int64), seed)


def batch_indices(n: int, batch_size: int, seed=None) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batches(data: ImageSet, batch_size: int, seed=None) -> Iterator[ImageSet]:
    """One epoch of mini-batches; the last partial batch is kept."""
    for idx in batch_indices(len(data), batch_size, seed):
        yield data.subset(idx)
