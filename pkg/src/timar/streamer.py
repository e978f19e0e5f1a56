"""Turn-wise streaming generation with a mask-token context buffer."""

from __future__ import annotations

from collections import deque

import numpy as np
import torch

from .config import HEAD_DIM
from .context import AGENT_HEAD, TurnTokens, apply_cfg_drop, chunk_sequences
from .diffusion import sample
from .featurize import extract_features, interp_to_framerate
from .model import TimarModel
from .normalize import NormStats
from .rng import seeded_rng, stream_label


class StreamError(ValueError):
    pass


class ContextBuffer:
    """The last ``capacity`` tokenized turns; agent-head slots always hold ``h^m``."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise StreamError("buffer capacity must be non-negative")
        self.capacity = capacity
        self.turns: deque[TurnTokens] = deque(maxlen=capacity)

    def append(self, turn: TurnTokens) -> None:
        if not bool(turn.agent_head_is_mask.all()):
            raise StreamError("buffered turns must keep mask tokens in every agent-head slot")
        if self.capacity:
            self.turns.append(turn)

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self):
        return iter(self.turns)

    def snapshot(self) -> "ContextBuffer":
        other = ContextBuffer(self.capacity)
        other.turns.extend(self.turns)
        return other


class Streamer:
    """Holds a trained model plus one conversation's context buffer."""

    def __init__(self, model: TimarModel, norm: NormStats | None, n: int):
        self.model = model.eval()
        self.cfg = model.cfg
        self.norm = norm
        self.buffer = ContextBuffer(n)

    @torch.no_grad()
    def push_turn(self, S_u_t, S_a_t, H_u_t) -> TurnTokens:
        """Tokenize one turn of observed streams; the agent head is all mask tokens.

        The turn is not added to the buffer here; :meth:`generate_turn` does that.
        """
        cfg = self.cfg
        if self.norm is None:
            raise StreamError("normalisation statistics are required")
        for name, x, n in (("user speech", S_u_t, cfg.chunk_samples), ("agent speech", S_a_t, cfg.chunk_samples),
                           ("user head", H_u_t, cfg.K_frames)):
            if len(x) != n:
                raise StreamError(f"{name} segment has length {len(x)}, expected {n}")
        if np.shape(H_u_t)[-1] != HEAD_DIM:
            raise StreamError(f"user head frames must be {HEAD_DIM}-dim")
        feats = [self.norm.normalize_features(interp_to_framerate(extract_features(s, cfg), cfg.K_frames))
                 for s in (S_u_t, S_a_t)]
        (turn,) = self.model.tokenize_turns(feats[0], feats[1], self.norm.normalize(np.asarray(H_u_t)))
        return turn

    @torch.no_grad()
    def generate_turn(self, current: TurnTokens, omega: float = 1.0, steps_out: int | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        """Sample the agent head of ``current`` given the buffered history.

        Returns denormalised ``[K_frames, 56]`` frames and appends ``current``
        (agent slots still masked) to the buffer.
        """
        if self.norm is None:
            raise StreamError("normalisation statistics are required")
        model = self.model
        steps_out = self.cfg.diff_sample_steps if steps_out is None else steps_out
        rng = seeded_rng(0, "sample") if rng is None else rng
        ctx = model.context([*self.buffer, current])
        last = ctx.n_turns - 1
        pos = np.flatnonzero((ctx.turn_id == last) & (ctx.modality_id == AGENT_HEAD))
        pos = pos[np.argsort(ctx.frame_index[pos], kind="stable")]
        z = model.fusion.encode(ctx.tokens, ctx.turn_id)[pos]
        z_u = None
        if omega != 1:
            dropped = apply_cfg_drop(ctx, model.tokens.fake)
            z_u = model.fusion.encode(dropped.tokens, dropped.turn_id)[pos]
        x = sample(model.diff, model.schedule, z, ctx.frame_index[pos], omega, z_u, steps_out, rng)
        self.buffer.append(current)
        return self.norm.denormalize(x.double().numpy())


def run_conversation(model: TimarModel, norm: NormStats, turns, n: int, omega: float = 1.0,
                     steps_out: int | None = None, seed: int = 0, conversation: str = "") -> np.ndarray:
    """Generate the agent head for a stream of ``(S_u, S_a, H_u)`` turns.

    Turn ``t`` draws its noise from the stream ``(seed, "noise/<conversation>/<t>")``.
    """
    streamer = Streamer(model, norm, n)
    out = []
    for t, (S_u, S_a, H_u) in enumerate(turns):
        current = streamer.push_turn(S_u, S_a, H_u)
        rng = seeded_rng(seed, stream_label("noise", conversation, t))
        out.append(streamer.generate_turn(current, omega, steps_out, rng))
    if not out:
        return np.zeros((0, HEAD_DIM))
    return np.concatenate(out, axis=0)


def conversation_turns(sample, cfg):
    """Split a dialogue sample into the ``(S_u, S_a, H_u)`` stream consumed by the sampler."""
    return [(t.user_wave, t.agent_wave, t.user_head)
            for t in chunk_sequences(sample.user_wave, sample.agent_wave, sample.user_head, sample.agent_head, cfg)]
