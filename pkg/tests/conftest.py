import os
from pathlib import Path

import pytest
import torch

from lvaegan.nets import ArchitectureSpec, ModelBundle

DATA_ROOT = Path(os.environ.get("LVAEGAN_DATA", "/root/data"))


def tiny_arch(**kw):
    base = dict(image_shape=(4, 4, 1), dim_z=3, num_classes=3, kind="mlp", gen_hidden=[8], critic_hidden=[8],
                enc_hidden=[8], class_hidden=[8], task_hidden=[4])
    base.update(kw)
    return ArchitectureSpec(**base)


@pytest.fixture
def tiny_bundle():
    return ModelBundle(tiny_arch(), seed=0)


def have_data(*names):
    return all((DATA_ROOT / n / "train" / "manifest.yaml").exists() for n in names)


requires_data = pytest.mark.skipif(not have_data("mnist", "fashion"),
                                   reason="image tasks not imported; see README (import-data)")


def relerr(a, b):
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def fd_grad(f, param: torch.Tensor, eps=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``param`` (float64)."""
    g = torch.zeros_like(param)
    flat = param.data.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f().detach())
        flat[i] = old - eps
        lo = float(f().detach())
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


# criterion number -> (status, title, notes); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, notes = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}")
        for line in notes:
            terminalreporter.write_line(f"    {line}")
