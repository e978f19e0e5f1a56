import sys
import numpy as np
import pytest
import torch

from timar.config import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough for exhaustive checks: 5 frames per turn, 8-dim everything."""
    base = dict(d_t=8, d_e=8, encoder_layers=2, encoder_heads=2, d_m=8, K_blocks=2,
                f_s=800, f_h=5, f_w=50, d_raw=16, c=1.0, N_max=4,
                diff_train_steps=50, diff_sample_steps=10, batch_size=2, warmup_steps=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny64():
    return tiny_config(precision="f64")


@pytest.fixture(autouse=True)
def _single_thread():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def directional_fd_check(fn, tensors, n_dirs=3, h=1e-5, seed=0) -> float:
    """Max relative error between autograd and central differences of a scalar ``fn()``.

    ``tensors`` are leaf tensors (inputs and/or parameters, f64) that ``fn``
    reads; each trial perturbs all of them along one random direction.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t.add_(h * d)
            up = float(fn())
            for t, d in zip(tensors, dirs):
                t.sub_(2 * h * d)
            down = float(fn())
            for t, d in zip(tensors, dirs):
                t.add_(h * d)
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-8))
    return worst


def projection(shape, seed=1, dtype=torch.float64):
    """Fixed random weights that turn a tensor output into a scalar for gradient checks."""
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def lively_model(cfg=None, seed=0, scale=0.2):
    """A freshly initialised model whose zero-initialised diffusion layers are randomised.

    At true initialisation the denoiser ignores its condition, which would make
    dependence/independence tests vacuous.
    """
    from timar.model import TimarModel

    cfg = cfg or tiny_config()
    model = TimarModel(cfg, seed)
    gen = torch.Generator().manual_seed(seed + 1000)
    with torch.no_grad():
        for name, p in model.diff.named_parameters():
            if ".mod." in name or name.startswith("final."):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model.eval()


def random_conversation(cfg, n_turns, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(-1, 1, cfg.chunk_samples), rng.uniform(-1, 1, cfg.chunk_samples),
             rng.standard_normal((cfg.K_frames, 56))) for _ in range(n_turns)]


def unit_norm():
    from timar.normalize import NormStats

    return NormStats(mean=np.zeros(56), std=np.ones(56))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
