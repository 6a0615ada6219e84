"""Small fixed classifiers used as measuring instruments (never trained jointly with the model)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ProbeClassifier(nn.Module):
    """``conv``: two conv/pool blocks and one linear layer; ``mlp``/``linear``: fully connected."""

    def __init__(self, image_shape, num_classes: int = 10, kind: str = "conv", hidden=(), channels=(8, 16)):
        super().__init__()
        h, w, c = image_shape
        self.kind = kind
        if kind == "conv":
            c1, c2 = channels
            self.features = nn.Sequential(
                nn.Conv2d(c, c1, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
                nn.Conv2d(c1, c2, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
                nn.Flatten(),
            )
            dim = c2 * (h // 4) * (w // 4)
        elif kind in ("mlp", "linear"):
            layers = [nn.Flatten()]
            dim = h * w * c
            for width in (hidden if kind == "mlp" else ()):
                layers += [nn.Linear(dim, width), nn.ReLU()]
                dim = width
            self.features = nn.Sequential(*layers)
        else:
            raise ValueError(f"unknown probe kind {kind!r}")
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, x, batch_size: int = 1024) -> torch.Tensor:
        self.eval()
        return torch.cat([self(x[i : i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])

    @torch.no_grad()
    def embed(self, x, batch_size: int = 1024) -> torch.Tensor:
        self.eval()
        return torch.cat([self.features(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def train_probe(x: torch.Tensor, y: torch.Tensor, num_classes: int = 10, kind: str = "conv", hidden=(),
                epochs: int = 5, seed: int = 0, lr: float = 1e-3, batch_size: int = 64,
                weight_decay: float = 0.0) -> ProbeClassifier:
    """Fit a fresh probe with Adam; everything is a function of ``seed``."""
    _, c, h, w = x.shape
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = ProbeClassifier((h, w, c), num_classes, kind=kind, hidden=hidden)
    opt = torch.optim.Adam(probe.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    x = x.detach()
    y = y.detach().long()
    probe.train()
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(x)))
        for s in range(0, len(x), batch_size):
            idx = order[s : s + batch_size]
            loss = F.cross_entropy(probe(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    probe.eval()
    return probe
