"""Masked-diffusion training over interleaved contexts, plus checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .archive import archive_read, archive_write, archive_attrs
from .config import ModelConfig, config_from_dict, config_to_dict
from .context import apply_agent_mask, apply_cfg_drop
from .diffusion import diffusion_loss
from .featurize import featurize_waveform
from .layers import NonFiniteError
from .model import TimarModel
from .normalize import NormStats, compute_norm_stats
from .rng import seeded_rng, stream_label

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedData:
    """Featurized training samples stacked along axis 0.

    ``feats_*`` are ``[n, T*f_h, d_raw]`` aligned speech features; ``head_*`` are
    raw (unnormalised) ``[n, T*f_h, 56]`` frames.
    """

    feats_u: np.ndarray
    feats_a: np.ndarray
    head_u: np.ndarray
    head_a: np.ndarray
    ids: list

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "PreparedData":
        idx = np.asarray(idx)
        return PreparedData(self.feats_u[idx], self.feats_a[idx], self.head_u[idx], self.head_a[idx],
                            [self.ids[i] for i in idx])


def prepare(samples, cfg: ModelConfig) -> PreparedData:
    """Run the fixed feature extractor over every sample (chunk by chunk)."""
    fu, fa, hu, ha, ids = [], [], [], [], []
    for s in samples:
        fu.append(featurize_waveform(s.user_wave, cfg).astype(np.float32))
        fa.append(featurize_waveform(s.agent_wave, cfg).astype(np.float32))
        hu.append(np.asarray(s.user_head, dtype=np.float64))
        ha.append(np.asarray(s.agent_head, dtype=np.float64))
        ids.append(s.sample_id)
    if not ids:
        raise ValueError("no samples to prepare")
    return PreparedData(np.stack(fu), np.stack(fa), np.stack(hu), np.stack(ha), ids)


@dataclass
class TrainState:
    cfg: ModelConfig
    model: TimarModel
    optimizer: torch.optim.Optimizer
    norm: NormStats
    seed: int
    step: int = 0
    epoch: int = 0


def make_optimizer(model: TimarModel, cfg: ModelConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay, foreach=False,
    )


def init_state(cfg: ModelConfig, norm: NormStats, seed: int) -> TrainState:
    model = TimarModel(cfg, seed)
    return TrainState(cfg=cfg, model=model, optimizer=make_optimizer(model, cfg), norm=norm, seed=seed)


def learning_rate(cfg: ModelConfig, step: int) -> float:
    """Linear warm-up over ``warmup_steps`` iterations, then constant."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def batch_loss(model: TimarModel, norm: NormStats, batch: PreparedData, rng: np.random.Generator,
               p_cfg: float | None = None, r: float | None = None) -> dict[str, torch.Tensor]:
    cfg = model.cfg
    p_cfg = cfg.p_cfg if p_cfg is None else p_cfg
    r = cfg.r if r is None else r
    target = norm.normalize(batch.head_a)
    turns = model.tokenize_turns(norm.normalize_features(batch.feats_u), norm.normalize_features(batch.feats_a),
                                 norm.normalize(batch.head_u), target)
    ctx = model.context(turns)
    drop = rng.random(len(batch)) < p_cfg
    if drop.any():
        ctx = apply_cfg_drop(ctx, model.tokens.fake, which=drop)
    ctx, masked = apply_agent_mask(ctx, r, rng, model.tokens.mask)
    fused = model.fusion(ctx)
    x0 = model.as_tensor(np.take_along_axis(target, masked[..., None], axis=1))
    z, frames, k = fused.z_m, fused.frame_index, cfg.diff_batch_mul
    if k > 1:
        x0, z, frames = torch.cat([x0] * k), torch.cat([z] * k), np.concatenate([frames] * k)
    return diffusion_loss(model.diff, model.schedule, x0, z, frames, rng)


def train_step(state: TrainState, batch: PreparedData, rng: np.random.Generator) -> dict:
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad(set_to_none=True)
    try:
        parts = batch_loss(model, state.norm, batch, rng)
    except NonFiniteError as exc:
        raise TrainingError(f"step {state.step}: {exc}") from exc
    if not torch.isfinite(parts["total"]):
        raise TrainingError(f"step {state.step}: non-finite loss {parts['total'].item()}")
    parts["total"].backward()
    lr = learning_rate(state.cfg, state.step)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    record = {"step": state.step, "epoch": state.epoch, "lr": lr}
    record.update({k: float(v.detach()) for k, v in parts.items()})
    state.step += 1
    return record


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> tuple[int, np.ndarray]:
    """(epoch, sample indices) of global step ``step``; the last partial batch is dropped."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, i = divmod(step, per_epoch)
    order = seeded_rng(seed, stream_label("epoch", epoch)).permutation(n)
    return epoch, order[i * bs:(i + 1) * bs]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return seeded_rng(seed, stream_label("train", step))


def train(state: TrainState, data: PreparedData, n_steps: int, log_path=None, log=None) -> list[dict]:
    """Run ``n_steps`` optimisation steps, appending JSON lines to ``log_path``."""
    records = []
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for _ in range(n_steps):
            state.epoch, idx = batch_indices(len(data), state.cfg.batch_size, state.seed, state.step)
            t0 = time.perf_counter()
            rec = train_step(state, data.subset(idx), step_rng(state.seed, state.step))
            rec["seconds"] = time.perf_counter() - t0
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if log:
                log(rec)
    finally:
        if fh:
            fh.close()
    return records


def steps_for_epochs(cfg: ModelConfig, n_samples: int) -> int:
    return cfg.epochs * (n_samples // min(cfg.batch_size, n_samples))


def fit_norm(data: PreparedData) -> NormStats:
    """Agent-head target statistics plus speech-feature statistics (both speakers pooled)."""
    return compute_norm_stats(data.head_a, features=[data.feats_u, data.feats_a])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    names = {id(p): n for n, p in state.model.named_parameters()}
    entries = state.model.named_arrays()
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            entries.append((f"optim.exp_avg.{name}", st["exp_avg"].numpy()))
            entries.append((f"optim.exp_avg_sq.{name}", st["exp_avg_sq"].numpy()))
            entries.append((f"optim.step.{name}", np.array([float(st["step"])], dtype=np.float64)))
    entries += [
        ("train.step", np.array([state.step], dtype=np.int64)),
        ("train.epoch", np.array([state.epoch], dtype=np.int64)),
        ("train.seed", np.array([state.seed], dtype=np.int64)),
        ("norm.mean", np.asarray(state.norm.mean, dtype=np.float64)),
        ("norm.std", np.asarray(state.norm.std, dtype=np.float64)),
    ]
    if state.norm.feat_mean is not None:
        entries += [("norm.feat_mean", np.asarray(state.norm.feat_mean, dtype=np.float64)),
                    ("norm.feat_std", np.asarray(state.norm.feat_std, dtype=np.float64))]
    attrs = {"checkpoint_version": CHECKPOINT_VERSION, "config": config_to_dict(state.cfg),
             "package_version": __version__}
    archive_write(entries, path, attrs=attrs)


def load_checkpoint(path) -> TrainState:
    attrs = archive_attrs(path)
    version = attrs.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} != {CHECKPOINT_VERSION}")
    cfg = config_from_dict(attrs["config"])
    arrays = dict(archive_read(path))
    for key in ("train.step", "train.epoch", "train.seed", "norm.mean", "norm.std"):
        if key not in arrays:
            raise CheckpointError(f"missing array {key!r}")
    norm = NormStats(mean=arrays["norm.mean"], std=arrays["norm.std"],
                     feat_mean=arrays.get("norm.feat_mean"), feat_std=arrays.get("norm.feat_std"))
    seed = int(arrays["train.seed"][0])
    state = init_state(cfg, norm, seed)
    model = state.model
    own = model.state_dict()
    missing = [n for n in own if n not in arrays]
    if missing:
        raise CheckpointError(f"missing array {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    for name, tensor in own.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {tuple(tensor.shape)}")
    model.load_state_dict({n: torch.from_numpy(arrays[n]) for n in own})

    for name, p in model.named_parameters():
        key = f"optim.exp_avg.{name}"
        if key not in arrays:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(arrays[f"optim.step.{name}"][0], dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[key]).clone(),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim.exp_avg_sq.{name}"]).clone(),
        }
    state.step = int(arrays["train.step"][0])
    state.epoch = int(arrays["train.epoch"][0])
    return state


def load_model(path) -> tuple[TimarModel, NormStats]:
    state = load_checkpoint(path)
    state.model.eval()
    return state.model, state.norm


def default_checkpoint_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoint.tmr"


__all__ = [
    "CheckpointError", "PreparedData", "TrainState", "TrainingError", "batch_indices", "batch_loss",
    "compute_norm_stats", "fit_norm", "init_state", "learning_rate", "load_checkpoint", "load_model",
    "prepare", "save_checkpoint", "step_rng", "steps_for_epochs", "train", "train_step",
]
