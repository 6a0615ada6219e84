"""The five networks of the hybrid model and their checkpoint format.

Parameter groups follow the usual naming: the generator (theta) decodes
``(z, a, c)`` into an image, the critic (omega) scores images, the z-encoder
(varsigma) outputs ``(mu, sigma)``, the task head (epsilon) maps ``z`` to
domain logits and the class head (delta) maps ``x`` to class logits.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml
from torch import nn

from .latent import LatentTriple, PriorConfig, expand_domain, harden

ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "tanh": nn.Tanh,
    "elu": nn.ELU,
}
NETWORK_NAMES = ("generator", "critic", "z_encoder", "task_head", "class_head")


@dataclass
class ArchitectureSpec:
    """Shapes and widths of all five networks.

    For ``kind="conv"`` the ``*_hidden`` lists of the image networks are
    channel counts of two stride-2 convolutions (image sides must be divisible
    by 4); for ``kind="mlp"`` they are fully connected widths.
    """

    image_shape: tuple = (28, 28, 1)  # (height, width, channels)
    dim_z: int = 16
    num_classes: int = 10
    num_domains: int = 1
    conditional: bool = True
    kind: str = "conv"
    gen_hidden: list = field(default_factory=lambda: [64, 32])
    critic_hidden: list = field(default_factory=lambda: [32, 64])
    enc_hidden: list = field(default_factory=lambda: [32, 64])
    class_hidden: list = field(default_factory=lambda: [32, 64])
    task_hidden: list = field(default_factory=lambda: [64])
    activation: str = "leaky_relu"
    conditioning: str = "concat-input"
    output: str = "sigmoid"  # "identity" only for toy Gaussian-likelihood models

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"image_shape must be (H, W, C) with positive sides, got {self.image_shape}")
        if self.kind not in ("conv", "mlp"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.conditioning != "concat-input":
            raise ValueError(f"unsupported conditioning {self.conditioning!r}")
        if self.output not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output map {self.output!r}")
        for name in ("gen_hidden", "critic_hidden", "enc_hidden", "class_hidden", "task_hidden"):
            widths = [int(w) for w in getattr(self, name)]
            if any(w < 1 for w in widths):
                raise ValueError(f"{name} widths must be >= 1")
            setattr(self, name, widths)
        if self.kind == "conv":
            h, w, _ = self.image_shape
            if h % 4 or w % 4:
                raise ValueError("conv architectures need image sides divisible by 4")
            for name in ("gen_hidden", "critic_hidden", "enc_hidden", "class_hidden"):
                if len(getattr(self, name)) != 2:
                    raise ValueError(f"conv {name} must list exactly two channel counts")

    @property
    def chw(self) -> tuple:
        h, w, c = self.image_shape
        return (c, h, w)

    @property
    def num_pixels(self) -> int:
        return math.prod(self.image_shape)

    @property
    def code_dim(self) -> int:
        return self.dim_z + self.num_domains + (self.num_classes if self.conditional else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def _mlp(widths, act) -> list:
    layers = []
    for i in range(len(widths) - 1):
        layers += [nn.Linear(widths[i], widths[i + 1]), ACTIVATIONS[act]()]
    return layers


class ImageTrunk(nn.Module):
    """Feature extractor shared by the critic, the z-encoder and the class head."""

    def __init__(self, arch: ArchitectureSpec, hidden: list):
        super().__init__()
        c, h, w = arch.chw
        act = arch.activation
        if arch.kind == "conv":
            c1, c2 = hidden
            self.net = nn.Sequential(
                nn.Conv2d(c, c1, 4, 2, 1), ACTIVATIONS[act](),
                nn.Conv2d(c1, c2, 4, 2, 1), ACTIVATIONS[act](),
                nn.Flatten(),
            )
            self.out_dim = c2 * (h // 4) * (w // 4)
        else:
            self.net = nn.Sequential(nn.Flatten(), *_mlp([arch.num_pixels] + hidden, act))
            self.out_dim = hidden[-1] if hidden else arch.num_pixels

    def forward(self, x):
        return self.net(x)


class Generator(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.arch = arch
        act = arch.activation
        c, h, w = arch.chw
        if arch.kind == "conv":
            c1, c2 = arch.gen_hidden
            self.inp = nn.Linear(arch.code_dim, c1 * (h // 4) * (w // 4))
            self.body = nn.Sequential(
                ACTIVATIONS[act](),
                nn.Unflatten(1, (c1, h // 4, w // 4)),
                nn.ConvTranspose2d(c1, c2, 4, 2, 1), ACTIVATIONS[act](),
                nn.ConvTranspose2d(c2, c, 4, 2, 1),
            )
        else:
            widths = arch.gen_hidden
            first = widths[0] if widths else arch.num_pixels
            self.inp = nn.Linear(arch.code_dim, first)
            rest = []
            if widths:
                rest = [ACTIVATIONS[act]()] + _mlp(widths, act) + [nn.Linear(widths[-1], arch.num_pixels)]
            self.body = nn.Sequential(*rest, nn.Unflatten(1, arch.chw))

    def logits(self, z, a, c=None):
        parts = [z, a] if c is None else [z, a, c]
        return self.body(self.inp(torch.cat(parts, dim=1)))

    def forward(self, z, a, c=None):
        out = self.logits(z, a, c)
        return torch.sigmoid(out) if self.arch.output == "sigmoid" else out

    def expand_domain_input(self):
        """Insert a zero column for the new domain unit; the mapping is unchanged."""
        dz, k = self.arch.dim_z, self.arch.num_domains
        old = self.inp
        new = nn.Linear(old.in_features + 1, old.out_features)
        with torch.no_grad():
            new.weight.zero_()
            new.weight[:, : dz + k].copy_(old.weight[:, : dz + k])
            new.weight[:, dz + k + 1 :].copy_(old.weight[:, dz + k :])
            new.bias.copy_(old.bias)
        self.inp = new


class Critic(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.trunk = ImageTrunk(arch, arch.critic_hidden)
        self.out = nn.Linear(self.trunk.out_dim, 1)

    def forward(self, x):
        return self.out(self.trunk(x)).squeeze(-1)


class ZEncoder(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.trunk = ImageTrunk(arch, arch.enc_hidden)
        self.mu = nn.Linear(self.trunk.out_dim, arch.dim_z)
        self.half_logvar = nn.Linear(self.trunk.out_dim, arch.dim_z)

    def forward(self, x):
        h = self.trunk(x)
        return self.mu(h), torch.exp(self.half_logvar(h))


class TaskHead(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        widths = [arch.dim_z] + arch.task_hidden
        self.body = nn.Sequential(*_mlp(widths, arch.activation))
        self.out = nn.Linear(widths[-1], arch.num_domains)

    def forward(self, z):
        return self.out(self.body(z))


class ClassHead(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.trunk = ImageTrunk(arch, arch.class_hidden)
        self.out = nn.Linear(self.trunk.out_dim, arch.num_classes)

    def forward(self, x):
        return self.out(self.trunk(x))


def _check_images(x: torch.Tensor, arch: ArchitectureSpec):
    if x.dim() != 4 or tuple(x.shape[1:]) != arch.chw:
        raise ValueError(f"expected images of shape [batch, {', '.join(map(str, arch.chw))}], got {tuple(x.shape)}")


def generate(generator: Generator, z, a, c=None) -> torch.Tensor:
    arch = generator.arch
    if z.dim() != 2 or z.shape[1] != arch.dim_z:
        raise ValueError(f"z must be [batch, {arch.dim_z}], got {tuple(z.shape)}")
    if a.shape != (z.shape[0], arch.num_domains):
        raise ValueError(f"a must be [batch, {arch.num_domains}], got {tuple(a.shape)}")
    if arch.conditional:
        if c is None or c.shape != (z.shape[0], arch.num_classes):
            raise ValueError(f"c must be [batch, {arch.num_classes}]")
    elif c is not None:
        raise ValueError("unconditional generator does not take a class code")
    return generator(z, a, c)


def criticize(critic: Critic, x) -> torch.Tensor:
    return critic(x)


def infer_z(encoder: ZEncoder, x):
    mu, sigma = encoder(x)
    if not (torch.isfinite(mu).all() and torch.isfinite(sigma).all()):
        raise FloatingPointError("z-encoder produced non-finite activations")
    return mu, sigma


def infer_task(task_head: TaskHead, z) -> torch.Tensor:
    if task_head.out.out_features < 1:
        raise ValueError("task head has no domains")
    return task_head(z)


def infer_class(class_head: ClassHead, x) -> torch.Tensor:
    return class_head(x)


class ModelBundle(nn.Module):
    """All five networks plus the architecture they were built from."""

    def __init__(self, arch: ArchitectureSpec, seed: Optional[int] = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.arch = arch
        self.generator = Generator(arch)
        self.critic = Critic(arch)
        self.z_encoder = ZEncoder(arch)
        self.task_head = TaskHead(arch)
        self.class_head = ClassHead(arch) if arch.conditional else None

    def groups(self) -> dict:
        """Parameter lists keyed by network name."""
        return {
            name: list(getattr(self, name).parameters())
            for name in NETWORK_NAMES
            if getattr(self, name) is not None
        }

    @torch.no_grad()
    def mean_codes(self, x) -> LatentTriple:
        """Deterministic codes for ``x``: ``mu`` and hardened domain/class codes."""
        mu, _ = infer_z(self.z_encoder, x)
        a = harden(self.task_head(mu))
        c = harden(self.class_head(x)) if self.class_head is not None else None
        return LatentTriple(mu, a, c)

    @torch.no_grad()
    def decode(self, codes: LatentTriple) -> torch.Tensor:
        return generate(self.generator, codes.z, codes.a, codes.c)

    @torch.no_grad()
    def reconstruct(self, x) -> torch.Tensor:
        return self.decode(self.mean_codes(x))

    @torch.no_grad()
    def classify(self, x) -> torch.Tensor:
        if self.class_head is None:
            raise ValueError("unconditional model has no class head")
        return self.class_head(x)

    @torch.no_grad()
    def infer_domain(self, x) -> torch.Tensor:
        mu, _ = infer_z(self.z_encoder, x)
        return self.task_head(mu)

    def expand_domain(self, prior: PriorConfig, seed=0, epoch_in_progress=False) -> PriorConfig:
        """Grow the domain code by one unit in the task head and the generator input."""
        new_prior, head = expand_domain(prior, self.task_head, seed=seed, epoch_in_progress=epoch_in_progress)
        self.task_head = head
        self.generator.expand_domain_input()
        self.arch.num_domains += 1
        return new_prior

    def frozen_copy(self) -> "ModelBundle":
        b = copy.deepcopy(self)  # memo keeps b.arch and b.generator.arch the same object
        b.requires_grad_(False)
        b.eval()
        return b


def save_bundle(bundle: ModelBundle, path) -> Path:
    """Write one ``.npz`` per network plus ``arch.yaml`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in NETWORK_NAMES:
        net = getattr(bundle, name)
        if net is None:
            continue
        arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
        np.savez(path / f"{name}.npz", **arrays)
    with open(path / "arch.yaml", "w") as f:
        yaml.safe_dump(bundle.arch.to_dict(), f, sort_keys=True)
    return path


def load_arch(path) -> ArchitectureSpec:
    with open(Path(path) / "arch.yaml") as f:
        return ArchitectureSpec(**yaml.safe_load(f))


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not (path / "arch.yaml").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    bundle = ModelBundle(load_arch(path))
    for name in NETWORK_NAMES:
        net = getattr(bundle, name)
        if net is None:
            continue
        with np.load(path / f"{name}.npz") as data:
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
        net.load_state_dict(state)
    return bundle
