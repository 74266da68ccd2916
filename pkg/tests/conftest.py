"""Shared fixtures: tiny configs for fast unit tests and the cached
reference run used by the acceptance suite."""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from oodinv.config import NetConfig, SammConfig


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in getattr(rep, "nodeid", ""):
                name = rep.nodeid.split("::")[-1]
                lines.append((name, outcome.upper()))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {name}")

REPO_ROOT = Path(__file__).resolve().parent.parent
RUNS_DIR = REPO_ROOT / "runs"


def tiny_net_cfg() -> NetConfig:
    return NetConfig(
        output_resolution=16,
        style_dim=16,
        channels={4: 32, 8: 32, 16: 16},
        align_resolutions=(8,),
    )


@pytest.fixture
def net_cfg_tiny():
    return tiny_net_cfg()


@pytest.fixture
def model_tiny():
    from oodinv.model import InversionModel

    return InversionModel(tiny_net_cfg(), SammConfig(), seed=0)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """An (untrained) tiny stage-b checkpoint for CLI / service plumbing tests."""
    from oodinv.model import InversionModel

    model = InversionModel(tiny_net_cfg(), SammConfig(), seed=0)
    path = tmp_path_factory.mktemp("ckpt") / "tiny_b.ckpt"
    model.save(path, "b")
    return path


@pytest.fixture(scope="session")
def reference_run():
    """Train (or reuse) the seed-0 reference pipeline; returns its artifacts.

    The first invocation trains all three stages at the documented budgets
    and caches everything under runs/reference; later invocations load the
    cache. Metrics land in summary.json.
    """
    from oodinv.reference import load_or_run_reference

    return load_or_run_reference(RUNS_DIR / "reference", quiet=False)


def finite_diff_grad(f, x: torch.Tensor, eps: float = 1e-4,
                     indices=None) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. tensor x.

    `indices` restricts evaluation to those flat positions (grad is zero
    elsewhere); by default every entry is probed.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    if indices is None:
        indices = range(flat.numel())
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
