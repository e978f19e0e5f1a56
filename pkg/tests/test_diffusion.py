import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from timar.diffusion import (
    DiffusionError, DiffusionHead, NoiseSchedule, denoise, diffusion_loss, forward_noise, guide, modulate, sample,
)
from timar.rng import seeded_rng

from conftest import directional_fd_check, projection, tiny_config


def cosine_oracle(steps, s=0.008):
    f = lambda t: math.cos((t / steps + s) / (1 + s) * math.pi / 2) ** 2
    return np.array([f(t) / f(0) for t in range(steps + 1)])


def test_schedule_matches_formula_and_is_sane():
    sch = NoiseSchedule(1000)
    oracle = cosine_oracle(1000)
    assert sch.alpha_bar[0] == 1.0
    # identical up to the final step, where the beta cap bites
    assert np.allclose(sch.alpha_bar[:-1], oracle[:-1], rtol=1e-10, atol=1e-14)
    assert np.all(np.diff(sch.alpha_bar) < 0)
    betas = sch.betas[1:]
    assert np.all((betas > 0) & (betas < 1))
    post = sch.posterior_variance()[1:]
    assert np.all((post >= 0) & (post < 1))


@pytest.mark.parametrize("steps", [1, 2, 10, 50])
def test_schedule_small_step_counts(steps):
    sch = NoiseSchedule(steps)
    assert np.all(np.diff(sch.alpha_bar) < 0) and sch.alpha_bar[-1] > 0


def test_respacing():
    sch = NoiseSchedule(1000)
    taus = sch.respaced(100)
    assert len(taus) == 100 and taus[0] == 1 and taus[-1] == 1000 and np.all(np.diff(taus) > 0)
    assert sch.respaced(1).tolist() == [1000]
    assert np.array_equal(sch.respaced(1000), np.arange(1, 1001))
    with pytest.raises(DiffusionError):
        sch.respaced(1001)


def test_forward_noise_laws():
    sch = NoiseSchedule(1000)
    eps = np.random.default_rng(0).standard_normal(56)
    x0 = np.random.default_rng(1).standard_normal(56)
    assert np.array_equal(forward_noise(np.zeros(56), 300, None, sch, eps=eps), math.sqrt(1 - sch.alpha_bar[300]) * eps)
    near = forward_noise(x0, 1, None, sch, eps=eps)
    assert np.linalg.norm(near - x0) <= math.sqrt(1 - sch.alpha_bar[1]) * np.linalg.norm(eps) + np.linalg.norm(x0) * (1 - math.sqrt(sch.alpha_bar[1])) + 1e-12
    with pytest.raises(DiffusionError):
        forward_noise(x0, 0, seeded_rng(0, "n"), sch)
    with pytest.raises(DiffusionError):
        forward_noise(x0, 1001, seeded_rng(0, "n"), sch)


@pytest.mark.parametrize("tau", [10, 500, 990])
def test_forward_noise_moments(tau):
    sch = NoiseSchedule(1000)
    x0 = np.full((100_000, 1), 0.7)
    x = forward_noise(x0, np.full(100_000, tau), seeded_rng(tau, "mc"), sch)
    var = 1 - sch.alpha_bar[tau]
    assert abs(x.var() / var - 1) < 0.02
    assert abs(x.mean() - math.sqrt(sch.alpha_bar[tau]) * 0.7) < 4 * math.sqrt(var / 100_000)


def test_modulate():
    assert modulate(torch.tensor(2.0), torch.tensor(1.0), torch.tensor(0.5)) == 4.0


def head_and_inputs(cfg, M=6, seed=0):
    torch.manual_seed(seed)
    head = DiffusionHead(cfg).to(cfg.torch_dtype)
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(M, 56, generator=g, dtype=cfg.torch_dtype)
    cond = torch.randn(M, cfg.d_e, generator=g, dtype=cfg.torch_dtype)
    frames = np.arange(M) % (cfg.N_max * cfg.K_frames)
    return head, x, cond, frames


def test_zero_init_output(tiny):
    head, x, cond, frames = head_and_inputs(tiny)
    out = denoise(head, x, np.arange(1, 7), cond, frames)
    assert torch.count_nonzero(out) == 0


def test_frame_index_range(tiny):
    head, x, cond, _ = head_and_inputs(tiny, M=1)
    with pytest.raises(DiffusionError):
        denoise(head, x, 5, cond, [tiny.N_max * tiny.K_frames])
    with pytest.raises(DiffusionError):
        denoise(head, x, 0, cond, [0])


def randomize(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def test_denoiser_gradient_check():
    cfg = tiny_config(d_m=8, K_blocks=2, precision="f64")
    head, x, cond, frames = head_and_inputs(cfg)
    randomize(head)
    w = projection((6, 56))
    taus = np.array([1, 7, 20, 33, 49, 50])
    err = directional_fd_check(lambda: (head(x, taus, cond, frames) * w).sum(), [x, cond, *head.parameters()])
    assert err < 1e-4


def test_loss_identities(tiny):
    sch = NoiseSchedule(tiny.diff_train_steps)
    head, x0, cond, frames = head_and_inputs(tiny, M=10)
    parts = diffusion_loss(head, sch, x0, cond, frames, seeded_rng(0, "l"))
    expected = float((x0**2).sum(-1).mean())
    assert abs(float(parts["total"].detach()) - expected) < 1e-5 * expected
    assert parts["total"] == parts["exp"] + parts["jaw"] + parts["pose"]
    assert abs(float(parts["jaw"].detach()) - float((x0[:, 50:53] ** 2).sum(-1).mean())) < 1e-6

    class Perfect(torch.nn.Module):
        def forward(self, x_tau, tau, cond, frame_index):
            return x0
    assert float(diffusion_loss(Perfect(), sch, x0, cond, frames, seeded_rng(0, "l"))["total"]) == 0.0

    with pytest.raises(DiffusionError):
        diffusion_loss(head, sch, x0[:0], cond[:0], frames[:0], seeded_rng(0, "l"))


def test_loss_permutation_invariant():
    cfg = tiny_config(precision="f64")
    sch = NoiseSchedule(cfg.diff_train_steps)
    head, x0, cond, frames = head_and_inputs(cfg, M=10)
    randomize(head)
    perm = np.random.default_rng(0).permutation(10)
    # reorder the noise draws consistently by drawing them up front
    rng = seeded_rng(0, "perm")
    tau = rng.integers(1, sch.steps + 1, size=10)
    eps = rng.standard_normal((10, 56))
    xt = forward_noise(x0, tau, None, sch, eps=eps)
    a = ((head(xt, tau, cond, frames) - x0) ** 2).sum(-1).mean()
    b = ((head(xt[perm], tau[perm], cond[perm], frames[perm]) - x0[perm]) ** 2).sum(-1).mean()
    assert torch.allclose(a, b, rtol=1e-12)


def test_guide_identities():
    c, u = torch.randn(4, 56, dtype=torch.float64), torch.randn(4, 56, dtype=torch.float64)
    assert guide(c, u, 1.0) is c and guide(c, u, 0.0) is u
    g = [guide(c, u, w) for w in (0.5, 2.0, 3.5)]
    # collinearity: g(w) - g(w0) proportional to (w - w0)
    lhs = (g[1] - g[0]) / 1.5
    rhs = (g[2] - g[0]) / 3.0
    assert torch.allclose(lhs, rhs, atol=1e-9, rtol=0)


def test_sampler_constant_denoiser(tiny):
    head, _, cond, frames = head_and_inputs(tiny, M=5)
    v = torch.linspace(-2, 2, 56)
    with torch.no_grad():
        head.final.out.bias.copy_(v)
    cfg = tiny_config(diff_train_steps=1000)
    sch = NoiseSchedule(1000)
    out = sample(head, sch, cond, frames, 1.0, None, 100, seeded_rng(0, "s"))
    assert float((out - v).abs().max()) < 1e-3


def test_sampler_requires_uncond(tiny):
    head, _, cond, frames = head_and_inputs(tiny, M=2)
    sch = NoiseSchedule(tiny.diff_train_steps)
    with pytest.raises(DiffusionError):
        sample(head, sch, cond, frames, 2.0, None, 5, seeded_rng(0, "s"))


def test_sampler_omega_branches():
    cfg = tiny_config(precision="f64")
    head, _, cond, frames = head_and_inputs(cfg, M=4)
    randomize(head, seed=3)
    uncond = torch.randn_like(cond)
    sch = NoiseSchedule(cfg.diff_train_steps)
    run = lambda w, c, u: sample(head, sch, c, frames, w, u, 10, seeded_rng(5, "s"))
    assert torch.equal(run(1.0, cond, uncond), run(1.0, cond, None))
    assert torch.equal(run(0.0, cond, uncond), run(1.0, uncond, None))
    assert not torch.equal(run(2.0, cond, uncond), run(1.0, cond, None))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 50))
def test_sampler_is_deterministic(steps_out):
    cfg = tiny_config()
    head, _, cond, frames = head_and_inputs(cfg, M=3)
    randomize(head, seed=1, scale=0.1)
    sch = NoiseSchedule(cfg.diff_train_steps)
    a = sample(head, sch, cond, frames, 1.0, None, steps_out, seeded_rng(9, "s"))
    b = sample(head, sch, cond, frames, 1.0, None, steps_out, seeded_rng(9, "s"))
    assert torch.equal(a, b) and torch.isfinite(a).all()
