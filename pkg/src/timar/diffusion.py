"""Per-frame diffusion head: cosine schedule, modulated MLP denoiser, x0 loss, sampler."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .config import COMPONENTS, HEAD_DIM, ModelConfig


class DiffusionError(ValueError):
    pass


class NoiseSchedule:
    """Cosine schedule over ``steps`` forward steps, indexed ``0..steps``.

    ``alpha_bar[0] == 1``; per-step betas follow the cosine curve and are capped
    at ``max_beta`` so the last step stays strictly inside (0, 1).
    """

    def __init__(self, steps: int = 1000, s: float = 0.008, max_beta: float = 0.999):
        self.steps = steps
        t = np.arange(steps + 1, dtype=np.float64) / steps
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        curve = f / f[0]
        betas = np.minimum(1.0 - curve[1:] / curve[:-1], max_beta)
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas[1:])])

    def posterior_variance(self) -> np.ndarray:
        """Fixed posterior variance beta_tilde[tau] for tau = 1..steps (index 0 unused)."""
        ab, ab_prev = self.alpha_bar[1:], self.alpha_bar[:-1]
        return np.concatenate([[0.0], self.betas[1:] * (1 - ab_prev) / (1 - ab)])

    def respaced(self, steps_out: int) -> np.ndarray:
        """Evenly strided timesteps ``1 = tau_0 < ... < tau_{n-1} = steps``."""
        if not 1 <= steps_out <= self.steps:
            raise DiffusionError(f"steps_out={steps_out} not in [1, {self.steps}]")
        if steps_out == 1:
            return np.array([self.steps])
        return np.unique(np.round(np.linspace(1, self.steps, steps_out)).astype(np.int64))


def forward_noise(x0, tau, rng: np.random.Generator, schedule: NoiseSchedule, eps=None):
    """Sample ``x_tau = sqrt(ab) x0 + sqrt(1 - ab) eps`` with ``eps ~ N(0, I)``.

    ``tau`` may be a scalar or one timestep per row of ``x0``.
    """
    tau = np.asarray(tau)
    if np.any(tau < 1) or np.any(tau > schedule.steps):
        raise DiffusionError(f"timestep out of range [1, {schedule.steps}]")
    is_torch = isinstance(x0, torch.Tensor)
    shape = tuple(x0.shape)
    if eps is None:
        eps = rng.standard_normal(shape)
    ab = schedule.alpha_bar[tau]
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if tau.ndim:
        a, b = a[..., None], b[..., None]
    if is_torch:
        to = lambda v: torch.as_tensor(v, dtype=x0.dtype)
        return to(a) * x0 + to(b) * to(eps)
    return a * np.asarray(x0) + b * eps


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def sinusoid(self, tau: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tau.dtype) / half)
        args = tau[..., None] * freqs
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.sinusoid(tau))


class ResBlock(nn.Module):
    """x + gate * MLP(Modulate(norm(x), shift, scale)); modulation is zero-initialised."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(dim, 3 * dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x, c):
        shift, scale, gate = self.mod(c).chunk(3, dim=-1)
        return x + gate * self.mlp(modulate(self.norm(x), shift, scale))


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, out_dim)
        for layer in (self.mod, self.out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.mod(c).chunk(2, dim=-1)
        return self.out(modulate(self.norm(x), shift, scale))


class DiffusionHead(nn.Module):
    """Denoiser predicting the clean 56-dim frame from ``(x_tau, tau, z^m, frame index)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.in_lift = nn.Linear(HEAD_DIM, cfg.d_m)
        self.cond_lift = nn.Linear(cfg.d_e, cfg.d_m)
        self.time_embed = TimestepEmbedder(cfg.d_m)
        self.P2 = nn.Parameter(torch.randn(cfg.N_max * cfg.K_frames, cfg.d_m) * 0.02)
        for i in range(cfg.K_blocks):
            self.add_module(f"block{i}", ResBlock(cfg.d_m))
        self.final = FinalLayer(cfg.d_m, HEAD_DIM)

    @property
    def blocks(self) -> list[ResBlock]:
        return [getattr(self, f"block{i}") for i in range(self.cfg.K_blocks)]

    def condition(self, tau, cond, frame_index) -> torch.Tensor:
        frame_index = torch.as_tensor(np.array(frame_index, dtype=np.int64))
        if frame_index.numel() and (frame_index.min() < 0 or frame_index.max() >= self.P2.shape[0]):
            raise DiffusionError(f"frame index outside [0, {self.P2.shape[0]})")
        tau = torch.as_tensor(np.array(tau, dtype=np.float64), dtype=cond.dtype)
        return self.cond_lift(cond) + self.P2[frame_index] + self.time_embed(tau)

    def forward(self, x_tau, tau, cond, frame_index) -> torch.Tensor:
        c = self.condition(tau, cond, frame_index)
        x = self.in_lift(x_tau)
        for block in self.blocks:
            x = block(x, c)
        return self.final(x, c)


def denoise(head: DiffusionHead, x_tau, tau, cond, frame_index) -> torch.Tensor:
    dtype = next(head.parameters()).dtype
    x_tau = torch.as_tensor(x_tau, dtype=dtype)
    cond = torch.as_tensor(cond, dtype=dtype)
    tau = np.broadcast_to(np.asarray(tau), x_tau.shape[:-1])
    if np.any(tau < 1) or np.any(tau > head.cfg.diff_train_steps):
        raise DiffusionError("timestep out of range")
    return head(x_tau, tau, cond, np.broadcast_to(np.asarray(frame_index), x_tau.shape[:-1]))


def diffusion_loss(head: DiffusionHead, schedule: NoiseSchedule, x0, cond, frame_index,
                   rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """x0-prediction loss over masked positions, split into exp/jaw/pose terms.

    Each term is the per-position squared error summed over the component's
    dims and averaged over positions; ``total`` is their unweighted sum.
    Leading dims of ``x0`` are flattened into one position axis.
    """
    x0 = x0.reshape(-1, HEAD_DIM)
    if x0.shape[0] == 0:
        raise DiffusionError("empty masked set: nothing to train on")
    cond = cond.reshape(x0.shape[0], -1)
    frame_index = np.asarray(frame_index).reshape(-1)
    tau = rng.integers(1, schedule.steps + 1, size=x0.shape[0])
    x_tau = forward_noise(x0, tau, rng, schedule)
    pred = head(x_tau, tau, cond, frame_index)
    err = (x0 - pred) ** 2
    parts = {name: err[:, sl].sum(-1).mean() for name, sl in COMPONENTS.items()}
    parts["total"] = parts["exp"] + parts["jaw"] + parts["pose"]
    return parts


def guide(cond_pred, uncond_pred, omega: float):
    """``u + omega * (c - u)``, returning the branch itself exactly at omega 1 or 0."""
    if omega == 1:
        return cond_pred
    if omega == 0:
        return uncond_pred
    return uncond_pred + omega * (cond_pred - uncond_pred)


@torch.no_grad()
def sample(head: DiffusionHead, schedule: NoiseSchedule, cond_rows, frame_indices, omega: float,
           cond_rows_uncond, steps_out: int, rng: np.random.Generator) -> torch.Tensor:
    """Respaced ancestral sampling with guidance in x0 space.

    Starts from ``N(0, I)`` at ``tau = steps`` and walks the strided sub-schedule
    down to ``tau = 1``; the last update returns the guided x0 prediction.
    """
    if omega != 1 and cond_rows_uncond is None:
        raise DiffusionError("unconditional rows are required when omega != 1")
    dtype = next(head.parameters()).dtype
    cond = torch.as_tensor(cond_rows, dtype=dtype)
    uncond = None if cond_rows_uncond is None else torch.as_tensor(cond_rows_uncond, dtype=dtype)
    frame_indices = np.asarray(frame_indices)
    M = cond.shape[0]
    taus = schedule.respaced(steps_out)
    x = torch.as_tensor(rng.standard_normal((M, HEAD_DIM)), dtype=dtype)
    for j in range(len(taus) - 1, -1, -1):
        tau = int(taus[j])
        t = np.full(M, tau)
        c_pred = head(x, t, cond, frame_indices) if omega != 0 else None
        u_pred = head(x, t, uncond, frame_indices) if omega != 1 else None
        g = guide(c_pred, u_pred, omega)
        ab = schedule.alpha_bar[tau]
        ab_prev = schedule.alpha_bar[taus[j - 1]] if j > 0 else 1.0
        beta = 1.0 - ab / ab_prev
        coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        coef_xt = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
        x = coef_x0 * g + coef_xt * x
        if j > 0:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = x + math.sqrt(var) * torch.as_tensor(rng.standard_normal((M, HEAD_DIM)), dtype=dtype)
    return x
