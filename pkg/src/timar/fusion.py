"""Turn-level causal fusion: positional embedding, TLCA mask, transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .context import InterleavedContext
from .layers import TransformerLayer, allow_matrix, check_finite


class FusionError(ValueError):
    pass


def build_tlca_mask(turn_ids) -> np.ndarray:
    """Boolean ``allow[q, k] = turn_ids[k] <= turn_ids[q]``.

    Bidirectional inside a turn, causal across turns. Separators follow the
    rule through their own turn id.
    """
    ids = np.asarray(turn_ids)
    if ids.ndim != 1:
        raise FusionError("turn_ids must be one-dimensional")
    if np.any(np.diff(ids) < 0):
        raise FusionError("turn_ids must be non-decreasing")
    return allow_matrix(ids)


@dataclass
class FusedFeatures:
    Z: torch.Tensor             # [..., L, d_e]
    z_m: torch.Tensor           # [..., M, d_e], rows of Z at masked agent-head positions
    positions: np.ndarray       # [..., M] flat positions of the z_m rows
    frame_index: np.ndarray     # [..., M] global frame index of each z_m row


def masked_positions(ctx: InterleavedContext) -> np.ndarray:
    """Flat positions of masked agent-head rows, ``[..., M]`` in frame order."""
    agent = ctx.agent_positions
    flags = ctx.agent_mask[..., agent].numpy()
    lead = flags.shape[:-1]
    flat = flags.reshape(-1, flags.shape[-1])
    counts = flat.sum(axis=1)
    if len(set(counts.tolist())) > 1:
        raise FusionError("batch items have different numbers of masked positions")
    pos = np.stack([agent[row] for row in flat]) if flat.size else np.zeros((1, 0), dtype=np.int64)
    return pos.reshape(*lead, -1)


class FusionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.d_t, cfg.d_e)
        self.P1 = nn.Parameter(torch.randn(cfg.max_len, cfg.d_e) * 0.02)
        for i in range(cfg.encoder_layers):
            self.add_module(f"layer{i}", TransformerLayer(cfg.d_e, cfg.encoder_heads))
        self.norm = nn.LayerNorm(cfg.d_e)

    @property
    def layers(self) -> list[TransformerLayer]:
        return [getattr(self, f"layer{i}") for i in range(self.cfg.encoder_layers)]

    def add_positional(self, tokens: torch.Tensor) -> torch.Tensor:
        """Lift ``d_t -> d_e`` and add window-relative positions ``P1[0:L]``."""
        L = tokens.shape[-2]
        if L > self.P1.shape[0]:
            raise FusionError(f"sequence length {L} exceeds positional capacity {self.P1.shape[0]}")
        return self.in_proj(tokens) + self.P1[:L]

    def encode(self, tokens: torch.Tensor, turn_ids) -> torch.Tensor:
        build_tlca_mask(turn_ids)  # validates ordering
        x = check_finite(self.add_positional(tokens), "fusion input")
        for i, layer in enumerate(self.layers):
            x = check_finite(layer(x, turn_ids), f"fusion layer {i}")
        return self.norm(x)

    def forward(self, ctx: InterleavedContext) -> FusedFeatures:
        Z = self.encode(ctx.tokens, ctx.turn_id)
        pos = masked_positions(ctx)
        idx = torch.from_numpy(pos)
        if Z.ndim == 2:
            z_m = Z[idx]
        else:
            flatZ = Z.reshape(-1, *Z.shape[-2:])
            flat_idx = idx.reshape(flatZ.shape[0], -1)
            z_m = torch.stack([flatZ[b, flat_idx[b]] for b in range(flatZ.shape[0])])
            z_m = z_m.reshape(*Z.shape[:-2], -1, Z.shape[-1])
        return FusedFeatures(Z=Z, z_m=z_m, positions=pos, frame_index=ctx.frame_index[pos])
