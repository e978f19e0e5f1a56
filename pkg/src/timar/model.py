"""The full TIMAR network: tokenizers, special tokens, fusion encoder, diffusion head."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .context import InterleavedContext, SpecialTokens, TurnTokens, interleave
from .diffusion import DiffusionHead, NoiseSchedule
from .featurize import HeadEncoder, SpeechEncoder
from .fusion import FusionEncoder
from .rng import seeded_rng


class TimarModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init_seed = int(seeded_rng(seed, "init").integers(0, 2**63 - 1))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(init_seed)
            self.speech = SpeechEncoder(cfg)
            self.head = HeadEncoder(cfg)
            self.tokens = SpecialTokens(cfg.d_t)
            self.fusion = FusionEncoder(cfg)
            self.diff = DiffusionHead(cfg)
        self.to(cfg.torch_dtype)
        self.schedule = NoiseSchedule(cfg.diff_train_steps)

    @property
    def dtype(self) -> torch.dtype:
        return self.fusion.P1.dtype

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=self.dtype)

    def tokenize_turns(self, feats_u, feats_a, head_u, head_a=None) -> list[TurnTokens]:
        """Encode per-frame inputs ``[..., N*K, *]`` into ``N`` turns of tokens.

        ``head_u``/``head_a`` are normalised head frames. Without ``head_a`` the
        agent-head blocks are filled with the mask token and flagged as masked.
        """
        K = self.cfg.K_frames
        feats_u, feats_a, head_u = (self.as_tensor(x) for x in (feats_u, feats_a, head_u))
        *lead, total, _ = feats_u.shape
        if total % K:
            raise ValueError(f"{total} frames is not a whole number of {K}-frame turns")
        n = total // K
        split = lambda t: t.reshape(*lead, n, K, t.shape[-1])
        s_u = self.speech(split(feats_u))
        s_a = self.speech(split(feats_a))
        h_u = self.head(split(head_u))
        if head_a is None:
            h_a = self.tokens.mask.expand(*lead, n, K, self.cfg.d_t)
            flags = torch.ones(*lead, n, K, dtype=torch.bool)
        else:
            h_a = self.head(split(self.as_tensor(head_a)))
            flags = torch.zeros(*lead, n, K, dtype=torch.bool)
        return [
            TurnTokens(s_u[..., i, :, :], s_a[..., i, :, :], h_u[..., i, :, :], h_a[..., i, :, :],
                       flags[..., i, :])
            for i in range(n)
        ]

    def context(self, turns: list[TurnTokens]) -> InterleavedContext:
        return interleave(turns, self.tokens)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.detach().cpu().numpy()) for name, t in self.state_dict().items()]
