"""Command-line entry point: ``python -m lvaegan <command> ...``.

Every command exits 0 on success.  Failures print one JSON error record to
stderr (``{"error": <code>, "message": ...}``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import __version__
from .bounds import RiskConfig, RiskTracker, generator_sampler, lemma2_accumulated, measure_risks, write_bounds_csv
from .data import DataError, default_root, import_class_json, import_idx, load_stream
from .evalsuite import (
    EvalHook,
    MetricsLog,
    classifier_accuracy,
    interpolate,
    reconstruction_mse,
    replay_classifier_accuracy,
    save_grid,
    task_inference_accuracy,
    traverse,
)
from .latent import PriorConfig, sample_prior_codes
from .losses import LossWeights
from .nets import ArchitectureSpec, load_bundle
from .replay import load_snapshot, pseudo_label, sample_replay
from .trainer import TrainConfig, TrainingAborted, fan_out_seeds, run_sequence

log = logging.getLogger("lvaegan")

DEFAULT_CONFIG = {
    "run_dir": "runs/default",
    "run_id": "run",
    "tasks": ["mnist", "fashion"],
    "data": {"root": None, "n_train": 5000, "n_test": None, "scale": None, "seed": 0},
    "arch": asdict(ArchitectureSpec()),
    "train": {k: v for k, v in TrainConfig().to_dict().items()},
    "eval": {"n_eval": None, "track_bounds": False, "bounds_task": 0},
}

# flag name -> dotted config key
FLAG_KEYS = {
    "run_dir": "run_dir",
    "tasks": "tasks",
    "data_root": "data.root",
    "n_train": "data.n_train",
    "n_test": "data.n_test",
    "scale": "data.scale",
    "mode": "train.mode",
    "epochs": "train.epochs_per_task",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "replay": "train.replay",
    "replay_labels": "train.replay_labels",
    "n_labelled": "train.n_labelled",
    "beta": "train.weights.beta",
    "gamma": "train.weights.gamma",
    "max_steps": "train.max_steps_per_epoch",
    "arch_kind": "arch.kind",
    "dim_z": "arch.dim_z",
    "track_bounds": "eval.track_bounds",
    "n_eval": "eval.n_eval",
}


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1, **extra):
        super().__init__(message)
        self.record = {"error": code, "message": message, **extra}
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, status=2)


# ---------------------------------------------------------------- config


def set_key(cfg: dict, dotted: str, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_config(config_path: Optional[str], overrides: dict, sets=()) -> dict:
    """Defaults, then the YAML file, then flags; ``sets`` are raw ``key.path=yaml`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise CliError("config_not_found", f"no config file at {p}")
        with open(p) as f:
            cfg = deep_merge(cfg, yaml.safe_load(f) or {})
    for flag, value in overrides.items():
        if value is not None:
            set_key(cfg, FLAG_KEYS[flag], value)
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("usage", f"--set expects key=value, got {item!r}", status=2)
        set_key(cfg, key, yaml.safe_load(raw))
    if isinstance(cfg["tasks"], str):
        cfg["tasks"] = [t for t in cfg["tasks"].split(",") if t]
    return cfg


def configs_from(cfg: dict):
    arch = dict(cfg["arch"])
    train = dict(cfg["train"])
    train["weights"] = LossWeights(**train.get("weights", {}))
    mode = train.get("mode", "supervised")
    arch["conditional"] = mode != "unsupervised"
    if cfg["data"].get("scale"):
        s = int(cfg["data"]["scale"])
        arch["image_shape"] = (s, s, arch["image_shape"][2])
    return ArchitectureSpec(**arch), TrainConfig(**train)


def _load_stream(cfg: dict, names=None):
    d = cfg["data"]
    scale = d.get("scale")
    try:
        return load_stream(names or cfg["tasks"], root=d.get("root") or default_root(),
                           target_shape=(scale, scale) if scale else None, n_train=d.get("n_train"),
                           n_test=d.get("n_test"), seed=d.get("seed", 0))
    except DataError as e:
        raise CliError("data_error", str(e)) from e


# ---------------------------------------------------------------- manifest


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    config: dict
    code_version: str
    seeds: dict
    tasks: list
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.yaml"
        write_atomic(path, yaml.safe_dump(asdict(self), sort_keys=True))
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        with open(Path(run_dir) / "manifest.yaml") as f:
            return cls(**yaml.safe_load(f))


# ---------------------------------------------------------------- commands


def _yaml_safe(cfg: dict) -> dict:
    return json.loads(json.dumps(cfg, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k, None) for k in FLAG_KEYS}
    cfg = _yaml_safe(build_config(args.config, overrides, args.set or []))
    arch, tcfg = configs_from(cfg)
    run_dir = Path(cfg["run_dir"])
    if (run_dir / "manifest.yaml").exists() and not args.overwrite:
        raise CliError("run_dir_exists", f"{run_dir} already holds a run; pass --overwrite or pick another directory")
    if args.overwrite and run_dir.exists():
        shutil.rmtree(run_dir)
    stream = _load_stream(cfg)
    manifest = RunManifest(cfg, _code_version(), fan_out_seeds(tcfg.seed), list(cfg["tasks"]))
    manifest.write(run_dir)
    metrics = MetricsLog(run_dir / "metrics.csv")
    run_id = str(cfg.get("run_id", "run"))
    hooks = [EvalHook(stream, metrics, run_id, n_eval=cfg["eval"].get("n_eval"), seed=tcfg.seed)]
    tracker = None
    if cfg["eval"].get("track_bounds"):
        tracker = RiskTracker(stream, task_index=int(cfg["eval"].get("bounds_task", 0)),
                              cfg=RiskConfig(seed=manifest.seeds["eval"] % (2**31)))
        hooks.append(tracker)
    try:
        state = run_sequence(stream, arch, tcfg, run_dir=run_dir, hooks=hooks)
    except TrainingAborted as e:
        manifest.status, manifest.finished = "aborted", _now()
        manifest.write(run_dir)
        raise CliError("training_aborted", str(e), details=e.record) from e
    write_losses_csv(state.losses, run_dir / "losses.csv")
    if tracker is not None:
        tracker.write_csv(run_dir / "bounds.csv")
    b = state.bundle
    final_epoch = state.epoch - 1
    for t in stream:
        name = f"eval/recon_{t.name}.png"
        x = t.test.x[:8]
        save_grid(torch.cat([x, b.reconstruct(x)]), run_dir / name, nrow=8)
        metrics.log(run_id, t.index, final_epoch, "rec_pixel", reconstruction_mse(b, t.test.x, "pixel"),
                    tcfg.seed, artifact=name)
    manifest.status, manifest.finished = "completed", _now()
    manifest.write(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "epochs": state.epoch, "tasks": state.task_names}))
    return 0


def write_losses_csv(rows, path):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _checkpoint(path) -> tuple:
    """Resolve ``--ckpt`` (a checkpoint dir or a run dir, which means its last checkpoint)."""
    p = Path(path)
    if (p / "checkpoints").is_dir():
        cks = sorted((p / "checkpoints").glob("task_*"), key=lambda q: int(q.name.split("_")[1]))
        if cks:
            p = cks[-1]
    try:
        bundle = load_bundle(p)
    except FileNotFoundError:
        raise CliError("checkpoint_not_found", f"no checkpoint at {path}", path=str(path))
    run_dir = p.parent.parent if p.parent.name == "checkpoints" else None
    return bundle, p, run_dir


def _run_config(run_dir) -> dict:
    if run_dir is not None and (run_dir / "manifest.yaml").exists():
        return RunManifest.read(run_dir).config
    return copy.deepcopy(DEFAULT_CONFIG)


def _stream_for(args, run_dir):
    cfg = _run_config(run_dir)
    if getattr(args, "data_root", None):
        cfg["data"]["root"] = args.data_root
    names = args.tasks.split(",") if getattr(args, "tasks", None) else None
    return cfg, _load_stream(cfg, names)


def _out_dir(args, ckpt_dir, run_dir) -> Path:
    if args.out:
        return Path(args.out)
    return (run_dir if run_dir is not None else ckpt_dir) / "eval"


def cmd_eval(args) -> int:
    bundle, ckpt, run_dir = _checkpoint(args.ckpt)
    cfg, stream = _stream_for(args, run_dir)
    out = _out_dir(args, ckpt, run_dir)
    metrics = MetricsLog(out / "metrics.csv")
    run_id = run_dir.name if run_dir else ckpt.name
    epoch = -1  # evaluation outside training
    for t in stream:
        x, y = t.test.x, t.test.y
        if bundle.class_head is not None:
            metrics.log(run_id, t.index, epoch, "accuracy", classifier_accuracy(bundle, x, y), args.seed)
        metrics.log(run_id, t.index, epoch, "rec_image_sum", reconstruction_mse(bundle, x), args.seed)
        name = f"recon_{t.name}.png"
        save_grid(torch.cat([x[:8], bundle.reconstruct(x[:8])]), out / name, nrow=8)
        metrics.log(run_id, t.index, epoch, "rec_pixel", reconstruction_mse(bundle, x, "pixel"), args.seed,
                    artifact=name)
    inferred = task_inference_accuracy(bundle, [t.test.x for t in stream])
    for i, t in enumerate(stream):
        metrics.log(run_id, t.index, epoch, "task_inference", inferred[i], args.seed)
    if bundle.class_head is not None and args.n_replay > 0:
        accs = replay_classifier_accuracy(_final_sampler(bundle), [t.test for t in stream], n=args.n_replay,
                                          seed=args.seed)
        for i, t in enumerate(stream):
            metrics.log(run_id, t.index, epoch, "replay_accuracy", accs[i], args.seed)
    print(json.dumps({"metrics": str(out / "metrics.csv"), "records": len(metrics.records)}))
    return 0


def _prior_of(bundle):
    a = bundle.arch
    return PriorConfig(a.dim_z, a.num_classes, a.num_domains)


def _final_sampler(bundle):
    """Replay from the final model: domain codes uniform over all learned tasks."""
    gen = bundle.frozen_copy().generator
    prior = _prior_of(bundle)

    def sample(n, seed):
        codes = sample_prior_codes(n, prior, seed, conditional=True)
        with torch.no_grad():
            return gen(codes.z, codes.a, codes.c), pseudo_label(codes)

    return sample


def _pick(stream, name_or_index):
    for t in stream:
        if t.name == name_or_index:
            return t
    try:
        return stream[int(name_or_index)]
    except (ValueError, IndexError):
        raise CliError("task_not_found", f"no task {name_or_index!r} in the stream")


def cmd_interpolate(args) -> int:
    bundle, ckpt, run_dir = _checkpoint(args.ckpt)
    _, stream = _stream_for(args, run_dir)
    t1, t2 = _pick(stream, args.from_task), _pick(stream, args.to_task)
    strip = interpolate(bundle, t1.test.x[args.index], t2.test.x[args.index2], args.steps)
    path = save_grid(strip, _out_dir(args, ckpt, run_dir) / f"interp_{t1.name}_{t2.name}.png")
    print(json.dumps({"png": str(path), "steps": args.steps}))
    return 0


def cmd_traverse(args) -> int:
    bundle, ckpt, run_dir = _checkpoint(args.ckpt)
    if not 0 <= args.dim < bundle.arch.dim_z:
        raise CliError("invalid_dim", f"dim must lie in [0, {bundle.arch.dim_z})", status=2)
    _, stream = _stream_for(args, run_dir)
    t = _pick(stream, args.task)
    strip = traverse(bundle, t.test.x[args.index], args.dim, args.lo, args.hi, args.steps)
    path = save_grid(strip, _out_dir(args, ckpt, run_dir) / f"traverse_dim{args.dim}.png")
    print(json.dumps({"png": str(path), "lo": args.lo, "hi": args.hi, "steps": args.steps}))
    return 0


def cmd_replay_sample(args) -> int:
    try:
        snap = load_snapshot(args.snapshot)
    except FileNotFoundError:
        raise CliError("snapshot_not_found", f"no snapshot at {args.snapshot}", path=str(args.snapshot))
    x, codes = sample_replay(snap, args.n, args.seed)
    out = Path(args.out) if args.out else Path(args.snapshot) / "samples"
    path = save_grid(x, out / f"replay_seed{args.seed}.png", nrow=min(args.n, 10))
    arrays = {"images": x.numpy(), "domain": codes.a.argmax(1).numpy()}
    if codes.c is not None:
        arrays["labels"] = pseudo_label(codes).numpy()
    np.savez(out / f"replay_seed{args.seed}.npz", **arrays)
    print(json.dumps({"png": str(path), "n": args.n}))
    return 0


def cmd_bounds(args) -> int:
    run_dir = Path(args.run)
    snaps = sorted((run_dir / "snapshots").glob("task_*"), key=lambda q: int(q.name.split("_")[1]))
    if not snaps:
        raise CliError("snapshot_not_found", f"no snapshots under {run_dir}", path=str(run_dir))
    _, stream = _stream_for(args, run_dir)
    rows, reports = [], []
    rcfg = RiskConfig(seed=args.seed, delta_conf=args.delta_conf, a_prime=args.a_prime)
    for sdir in snaps:
        snap = load_snapshot(sdir)
        for i in range(snap.task_count):
            rep = measure_risks(generator_sampler(snap.generator, snap.prior, i), stream[i].test, stream[i].train,
                                rcfg, num_classes=stream[i].num_classes)
            reports.append(rep)
            rows.append({"epoch": snap.task_count, "risk1": rep.risk_real, "risk2": rep.risk_generated,
                         "W": rep.w, "rhs": rep.rhs, "holds": int(rep.holds), "task": i, "D": rep.d,
                         "confidence": rep.confidence})
    out = Path(args.out) if args.out else run_dir / "bounds_snapshots.csv"
    write_bounds_csv(rows, out)
    agg = lemma2_accumulated(reports)
    print(json.dumps({"csv": str(out), "accumulated_lhs": agg.lhs, "accumulated_rhs": agg.rhs, "holds": agg.holds}))
    return 0


def cmd_import_data(args) -> int:
    root = Path(args.root) if args.root else default_root()
    try:
        if args.format == "idx":
            files = args.files or []
            if len(files) != 4:
                raise CliError("usage", "idx import needs --files train-images train-labels test-images test-labels",
                               status=2)
            out = import_idx(root, args.name, *files)
        else:
            out = import_class_json(root, args.name, args.src, test_per_class=args.test_per_class,
                                    train_per_class=args.train_per_class, seed=args.seed)
    except (DataError, FileNotFoundError) as e:
        raise CliError("data_error", str(e)) from e
    print(json.dumps({"task_dir": str(out)}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvaegan", description="Lifelong VAE-GAN experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train over a task sequence")
    t.add_argument("--config")
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--tasks", help="comma-separated task names")
    t.add_argument("--data-root", dest="data_root")
    t.add_argument("--n-train", dest="n_train", type=int)
    t.add_argument("--n-test", dest="n_test", type=int)
    t.add_argument("--scale", type=int, help="resize images to SCALE x SCALE")
    t.add_argument("--mode", choices=("supervised", "semi", "unsupervised"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--replay", choices=("generative", "none", "buffer"))
    t.add_argument("--replay-labels", dest="replay_labels", choices=("code", "classifier"))
    t.add_argument("--n-labelled", dest="n_labelled", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--arch-kind", dest="arch_kind", choices=("conv", "mlp"))
    t.add_argument("--dim-z", dest="dim_z", type=int)
    t.add_argument("--n-eval", dest="n_eval", type=int)
    t.add_argument("--track-bounds", dest="track_bounds", action="store_true", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    def ckpt_args(q):
        q.add_argument("--ckpt", required=True, help="checkpoint directory or run directory")
        q.add_argument("--tasks")
        q.add_argument("--data-root", dest="data_root")
        q.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    ckpt_args(e)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-replay", dest="n_replay", type=int, default=5000)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interpolate", help="decode a path between two test images")
    ckpt_args(i)
    i.add_argument("--from-task", dest="from_task", default="0")
    i.add_argument("--to-task", dest="to_task", default="1")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--index2", type=int, default=0)
    i.add_argument("--steps", type=int, default=10)
    i.set_defaults(func=cmd_interpolate)

    tr = sub.add_parser("traverse", help="vary one latent dimension")
    ckpt_args(tr)
    tr.add_argument("--dim", type=int, required=True)
    tr.add_argument("--task", default="0")
    tr.add_argument("--index", type=int, default=0)
    tr.add_argument("--lo", type=float, default=-3.0)
    tr.add_argument("--hi", type=float, default=3.0)
    tr.add_argument("--steps", type=int, default=7)
    tr.set_defaults(func=cmd_traverse)

    r = sub.add_parser("replay-sample", help="draw images from a stored snapshot")
    r.add_argument("--snapshot", required=True)
    r.add_argument("--n", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay_sample)

    b = sub.add_parser("bounds", help="bound probes on the stored snapshots of a run")
    b.add_argument("--run", required=True)
    b.add_argument("--tasks")
    b.add_argument("--data-root", dest="data_root")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--delta-conf", dest="delta_conf", type=float, default=0.05)
    b.add_argument("--a-prime", dest="a_prime", type=float, default=1.0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)

    d = sub.add_parser("import-data", help="convert a dataset archive into the task layout")
    d.add_argument("--format", choices=("idx", "class-json"), required=True)
    d.add_argument("--name", required=True)
    d.add_argument("--root")
    d.add_argument("--src", help="class-json: directory of 0.json..9.json")
    d.add_argument("--files", nargs="*", help="idx: train-images train-labels test-images test-labels")
    d.add_argument("--test-per-class", dest="test_per_class", type=int, default=500)
    d.add_argument("--train-per-class", dest="train_per_class", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_import_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except CliError as e:
        print(json.dumps(e.record, default=str), file=sys.stderr)
        return e.status


if __name__ == "__main__":
    sys.exit(main())
