"""Speech and head tokenizers.

Audio path: waveform chunk -> log filter-bank features at ``f_w`` Hz
(``c*f_w - 1`` rows per chunk) -> linear resampling to ``f_h`` -> learnable
lift, one bidirectional encoder layer over the chunk, learnable projection
into the ``d_t`` token space. Head path: a frame-wise MLP on 56-dim frames.

Each chunk is featurized and encoded on its own, so no chunk ever reads
samples or frames of its neighbours.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import HEAD_DIM, ModelConfig
from .layers import TransformerLayer, check_finite

LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


def frame_params(cfg: ModelConfig) -> tuple[int, int]:
    """(window, hop) in samples: 25 ms windows at the raw feature rate."""
    hop = cfg.f_s // cfg.f_w
    return hop * 5 // 4, hop


def extract_features(chunk: np.ndarray, cfg: ModelConfig, rate: int | None = None) -> np.ndarray:
    """Deterministic stand-in for a pretrained acoustic front end.

    Column 0 is the log short-time energy of each window; columns 1.. are log
    squared DFT magnitudes at ``d_raw - 1`` linearly spaced frequencies
    ``j * f_s / (2 * d_raw)`` for ``j = 1 .. d_raw - 1`` (Hann window).
    """
    rate = cfg.f_s if rate is None else rate
    if rate != cfg.f_s:
        raise FeatureError(f"sample rate {rate} != f_s={cfg.f_s}")
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 1 or chunk.shape[0] != cfg.chunk_samples:
        raise FeatureError(f"chunk has {chunk.shape} samples, expected ({cfg.chunk_samples},)")
    win, hop = frame_params(cfg)
    rows = cfg.raw_rows
    frames = np.lib.stride_tricks.sliding_window_view(chunk, win)[::hop][:rows]
    if frames.shape[0] != rows:
        raise FeatureError(f"chunk yields {frames.shape[0]} windows, expected {rows}")
    energy = np.log(np.sum(frames**2, axis=1) + LOG_FLOOR)
    spec = np.fft.rfft(frames * np.hanning(win), n=2 * cfg.d_raw, axis=1)
    bands = np.log(np.abs(spec[:, 1 : cfg.d_raw]) ** 2 + LOG_FLOOR)
    return np.concatenate([energy[:, None], bands], axis=1)


def band_frequencies(cfg: ModelConfig) -> np.ndarray:
    """Centre frequency (Hz) of each band column (excludes the energy column)."""
    return np.arange(1, cfg.d_raw) * cfg.f_s / (2 * cfg.d_raw)


def interp_to_framerate(raw: np.ndarray, n_out: int) -> np.ndarray:
    """Endpoint-preserving linear resampling along axis 0."""
    raw = np.asarray(raw)
    rows = raw.shape[0]
    if rows < 2:
        raise FeatureError(f"need at least 2 rows to interpolate, got {rows}")
    pos = np.linspace(0.0, rows - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(np.int64), rows - 2)
    w = (pos - lo)[:, None]
    return (1.0 - w) * raw[lo] + w * raw[lo + 1]


def featurize_waveform(samples: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-chunk features of a whole waveform, aligned to the motion frame rate.

    Returns ``[N * K_frames, d_raw]`` where ``N = len(samples) / chunk_samples``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = cfg.chunk_samples
    if samples.shape[0] % n:
        raise FeatureError(f"waveform length {samples.shape[0]} is not a multiple of {n}")
    chunks = samples.reshape(-1, n)
    return np.concatenate(
        [interp_to_framerate(extract_features(ch, cfg), cfg.K_frames) for ch in chunks], axis=0
    )


class ChunkContext(nn.Module):
    """One bidirectional encoder layer over a chunk, with an additive position vector."""

    def __init__(self, dim: int, heads: int, length: int):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(length, dim) * 0.02)
        self.layer = TransformerLayer(dim, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layer(x + self.pos)


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d_s = cfg.d_t
        self.lift = nn.Linear(cfg.d_raw, d_s)
        self.enc = ChunkContext(d_s, cfg.encoder_heads, cfg.K_frames)
        self.proj = nn.Linear(d_s, cfg.d_t)

    def forward(self, aligned: torch.Tensor) -> torch.Tensor:
        """``[..., K_frames, d_raw]`` chunk features -> ``[..., K_frames, d_t]`` tokens."""
        check_finite(aligned, "speech encoder input")
        return self.proj(self.enc(self.lift(aligned)))


class HeadEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.d_t // 2
        self.mlp = nn.Sequential(
            nn.Linear(HEAD_DIM, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, cfg.d_t),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        check_finite(frames, "head encoder input")
        return self.mlp(frames)


def speech_encode(encoder: SpeechEncoder, aligned) -> torch.Tensor:
    param = next(encoder.parameters())
    return encoder(torch.as_tensor(aligned, dtype=param.dtype))


def head_encode(encoder: HeadEncoder, frames) -> torch.Tensor:
    param = next(encoder.parameters())
    return encoder(torch.as_tensor(frames, dtype=param.dtype))
