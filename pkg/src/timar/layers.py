"""Transformer building blocks shared by the speech encoder and the fusion module."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN/inf; ``where`` names the first offending stage."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite activations at {where}")


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(where)
    return x


def turn_blocks(turn_ids) -> list[tuple[int, int]]:
    """Contiguous ``(start, end)`` runs of equal turn id, in order."""
    ids = np.asarray(turn_ids)
    if ids.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [ids.size]])
    return list(zip(starts.tolist(), ends.tolist()))


def allow_matrix(turn_ids) -> np.ndarray:
    ids = np.asarray(turn_ids)
    return ids[None, :] <= ids[:, None]


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, turn_ids=None, return_weights: bool = False):
        """Self-attention under the turn rule ``allow[q, k] = turn_ids[k] <= turn_ids[q]``.

        Queries are processed one turn block at a time against the key prefix that
        can possibly be visible (keys up to the end of the block). Disallowed keys
        inside that prefix get an additive -inf. Restricting the key range keeps a
        block's arithmetic independent of whatever follows it in the window, which
        makes prefix runs bit-identical to slices of longer runs.
        """
        *lead, L, dim = x.shape
        h = self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, L, h, dim // h).transpose(-3, -2)
        q, k, v = split(q), split(k), split(v)
        scale = 1.0 / math.sqrt(dim // h)

        ids = np.zeros(L, dtype=np.int64) if turn_ids is None else np.asarray(turn_ids)
        allow = torch.from_numpy(allow_matrix(ids))
        outs = []
        weights = x.new_zeros(*lead, h, L, L) if return_weights else None
        for start, end in turn_blocks(ids):
            # keys beyond the last query of this block are never visible when ids are sorted
            kend = int(np.max(np.flatnonzero(allow[start:end].any(0).numpy())) + 1)
            bias = torch.zeros(end - start, kend, dtype=x.dtype)
            bias.masked_fill_(~allow[start:end, :kend], float("-inf"))
            scores = (q[..., start:end, :] @ k[..., :kend, :].transpose(-1, -2)) * scale + bias
            attn = scores.softmax(dim=-1)
            outs.append(attn @ v[..., :kend, :])
            if return_weights:
                weights[..., start:end, :kend] = attn
        y = torch.cat(outs, dim=-2).transpose(-3, -2).reshape(*lead, L, dim)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    """Pre-norm layer: x + MHA(LN(x)), then x + FFN(LN(x)) with a 4x GELU MLP."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_ratio * dim), nn.GELU(), nn.Linear(ffn_ratio * dim, dim))

    def forward(self, x: torch.Tensor, turn_ids=None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), turn_ids)
        return x + self.ffn(self.norm2(x))

