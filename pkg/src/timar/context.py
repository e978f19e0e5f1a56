"""Interleaved audio-visual context: chunking, layout, masking, CFG drop.

Per-turn flat layout (``4*K + 10`` tokens)::

    [TB] [USB] user_speech [USE] [ASB] agent_speech [ASE]
         [UHB] user_head [UHE] [AHB] agent_head [AHE] [TE]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig

# modality ids
SEP, USER_SPEECH, AGENT_SPEECH, USER_HEAD, AGENT_HEAD = range(5)
MODALITY_NAMES = {SEP: "sep", USER_SPEECH: "user_speech", AGENT_SPEECH: "agent_speech",
                  USER_HEAD: "user_head", AGENT_HEAD: "agent_head"}
USER_MODALITIES = (USER_SPEECH, USER_HEAD)

# separator ids, in layout order
TURN_BEG, US_BEG, US_END, AS_BEG, AS_END, UH_BEG, UH_END, AH_BEG, AH_END, TURN_END = range(10)
N_SEPARATORS = 10

_BLOCKS = ((USER_SPEECH, US_BEG, US_END), (AGENT_SPEECH, AS_BEG, AS_END),
           (USER_HEAD, UH_BEG, UH_END), (AGENT_HEAD, AH_BEG, AH_END))


class ContextError(ValueError):
    pass


def turn_layout(K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-turn ``(modality_id, separator_id, frame_in_turn)``; -1 where not applicable."""
    modality, sep, frame = [SEP], [TURN_BEG], [-1]
    for mod, beg, end in _BLOCKS:
        modality += [SEP] + [mod] * K + [SEP]
        sep += [beg] + [-1] * K + [end]
        frame += [-1] + list(range(K)) + [-1]
    modality.append(SEP)
    sep.append(TURN_END)
    frame.append(-1)
    return np.array(modality), np.array(sep), np.array(frame)


@dataclass
class RawTurn:
    user_wave: np.ndarray
    agent_wave: np.ndarray
    user_head: np.ndarray
    agent_head: np.ndarray


def chunk_sequences(S_u, S_a, H_u, H_a, cfg: ModelConfig) -> list[RawTurn]:
    """Split aligned waveforms and head sequences into ``T / c`` turns."""
    S_u, S_a, H_u, H_a = (np.asarray(x) for x in (S_u, S_a, H_u, H_a))
    durations = {len(S_u) / cfg.f_s, len(S_a) / cfg.f_s, len(H_u) / cfg.f_h, len(H_a) / cfg.f_h}
    if len(durations) != 1:
        raise ContextError(f"input durations differ: {sorted(durations)} s")
    T = durations.pop()
    n_turns = T / cfg.c
    if T <= 0 or not math.isclose(n_turns, round(n_turns), abs_tol=1e-9):
        raise ContextError(f"duration {T} s is not divisible by chunk length c={cfg.c} s")
    ns, nf = cfg.chunk_samples, cfg.K_frames
    return [
        RawTurn(S_u[i * ns:(i + 1) * ns], S_a[i * ns:(i + 1) * ns],
                H_u[i * nf:(i + 1) * nf], H_a[i * nf:(i + 1) * nf])
        for i in range(int(round(n_turns)))
    ]


class SpecialTokens(nn.Module):
    """Learnable mask token, fake (CFG) token and the ten separator embeddings."""

    def __init__(self, d_t: int):
        super().__init__()
        self.mask = nn.Parameter(torch.randn(d_t) * 0.02)
        self.fake = nn.Parameter(torch.randn(d_t) * 0.02)
        self.sep = nn.Parameter(torch.randn(N_SEPARATORS, d_t) * 0.02)


@dataclass
class TurnTokens:
    """Token blocks of one turn; tensors are ``[..., K, d_t]`` (optional batch dims)."""

    user_speech: torch.Tensor
    agent_speech: torch.Tensor
    user_head: torch.Tensor
    agent_head: torch.Tensor
    agent_head_is_mask: torch.Tensor

    @property
    def K(self) -> int:
        return self.user_speech.shape[-2]

    def validate(self) -> None:
        shapes = {t.shape for t in (self.user_speech, self.agent_speech, self.user_head, self.agent_head)}
        if len(shapes) != 1:
            raise ContextError(f"turn blocks disagree in shape: {sorted(map(tuple, shapes))}")
        if tuple(self.agent_head_is_mask.shape) != tuple(self.agent_head.shape[:-1]):
            raise ContextError("agent_head_is_mask must have one flag per agent-head row")


@dataclass
class InterleavedContext:
    tokens: torch.Tensor          # [..., L, d_t]
    turn_id: np.ndarray           # [L]
    modality_id: np.ndarray       # [L]
    separator_id: np.ndarray      # [L], -1 for content rows
    frame_index: np.ndarray       # [L], global agent-head frame index, -1 elsewhere
    agent_mask: torch.Tensor      # [..., L] bool, True where an agent-head row holds h^m
    K: int

    @property
    def n_turns(self) -> int:
        return int(self.turn_id[-1]) + 1 if len(self.turn_id) else 0

    def __len__(self) -> int:
        return len(self.turn_id)

    @property
    def agent_positions(self) -> np.ndarray:
        """Flat positions of agent-head rows, ordered by global frame index."""
        pos = np.flatnonzero(self.modality_id == AGENT_HEAD)
        return pos[np.argsort(self.frame_index[pos], kind="stable")]

    def block(self, turn: int, modality: int) -> torch.Tensor:
        sel = np.flatnonzero((self.turn_id == turn) & (self.modality_id == modality))
        return self.tokens[..., sel, :]

    def masked_frames(self) -> np.ndarray:
        """Sorted global frame indices currently holding the mask token (unbatched)."""
        flags = self.agent_mask[..., self.agent_positions]
        if flags.ndim != 1:
            raise ContextError("masked_frames is defined for unbatched contexts")
        return np.flatnonzero(flags.numpy())


def interleave(turns: list[TurnTokens], special: SpecialTokens) -> InterleavedContext:
    if not turns:
        raise ContextError("no turns to interleave")
    for t in turns:
        t.validate()
    Ks = {t.K for t in turns}
    if len(Ks) != 1:
        raise ContextError(f"inconsistent K_frames across turns: {sorted(Ks)}")
    K = Ks.pop()
    lead = turns[0].user_speech.shape[:-2]
    d_t = turns[0].user_speech.shape[-1]
    sep = special.sep.to(turns[0].user_speech.dtype)

    def s(i):
        return sep[i].expand(*lead, 1, d_t)

    pieces, flags = [], []
    for t in turns:
        for mod, beg, end in _BLOCKS:
            block = {USER_SPEECH: t.user_speech, AGENT_SPEECH: t.agent_speech,
                     USER_HEAD: t.user_head, AGENT_HEAD: t.agent_head}[mod]
            pieces += ([s(TURN_BEG)] if mod == USER_SPEECH else []) + [s(beg), block, s(end)]
        pieces.append(s(TURN_END))
        # everything before the agent-head rows is 3K + 8 tokens; [AHE][TE] follow them
        flags += [torch.zeros(*lead, 3 * K + 8, dtype=torch.bool),
                  t.agent_head_is_mask.to(torch.bool), torch.zeros(*lead, 2, dtype=torch.bool)]

    modality, sep_ids, frame = turn_layout(K)
    n = len(turns)
    frame_index = np.concatenate([np.where(frame >= 0, frame + i * K, -1) for i in range(n)])
    frame_index[np.tile(modality, n) != AGENT_HEAD] = -1
    return InterleavedContext(
        tokens=torch.cat(pieces, dim=-2),
        turn_id=np.repeat(np.arange(n), len(modality)),
        modality_id=np.tile(modality, n),
        separator_id=np.tile(sep_ids, n),
        frame_index=frame_index,
        agent_mask=torch.cat(flags, dim=-1),
        K=K,
    )


def mask_count(r: float, n_frames: int) -> int:
    # round first so that e.g. 0.7 * 200 does not ceil to 141 through representation error
    return int(math.ceil(round(r * n_frames, 9)))


def apply_agent_mask(ctx: InterleavedContext, r: float, rng: np.random.Generator,
                     mask_token: torch.Tensor):
    """Replace ``ceil(r * N * K)`` uniformly chosen agent-head rows with ``mask_token``.

    Returns the new context and the sorted masked global frame indices
    (``[M]`` for an unbatched context, ``[B, M]`` for a batched one).
    """
    if not 0 < r <= 1:
        raise ContextError(f"mask ratio {r} not in (0, 1]")
    agent_pos = ctx.agent_positions
    n_frames = len(agent_pos)
    m = mask_count(r, n_frames)
    lead = tuple(ctx.tokens.shape[:-2])
    batch = int(np.prod(lead)) if lead else 1
    chosen = np.stack([np.sort(rng.choice(n_frames, size=m, replace=False)) for _ in range(batch)])

    flags = torch.zeros(batch, len(ctx), dtype=torch.bool)
    rows = np.repeat(np.arange(batch), m)
    flags[rows, agent_pos[chosen.ravel()]] = True
    flags = flags.reshape(*lead, len(ctx))
    tokens = torch.where(flags[..., None], mask_token.to(ctx.tokens.dtype), ctx.tokens)
    masked = replace(ctx, tokens=tokens, agent_mask=ctx.agent_mask | flags)
    return masked, (chosen.reshape(*lead, m) if lead else chosen[0])


def apply_cfg_drop(ctx: InterleavedContext, fake_token: torch.Tensor, which=None) -> InterleavedContext:
    """Overwrite every user-speech and user-head row with ``fake_token``.

    ``which`` optionally selects batch items (bool ``[B]``); other items pass through.
    """
    user = torch.from_numpy(np.isin(ctx.modality_id, USER_MODALITIES))
    sel = user.expand(ctx.tokens.shape[:-1])
    if which is not None:
        sel = sel & torch.as_tensor(which, dtype=torch.bool).reshape(-1, *([1] * (sel.ndim - 1)))
    tokens = torch.where(sel[..., None], fake_token.to(ctx.tokens.dtype), ctx.tokens)
    return replace(ctx, tokens=tokens)
