"""Synthetic dyadic conversations with a known user -> agent coupling.

Generative process (frame rate ``f_h``, audio rate ``f_s``):

1. Speech activity alternates between the speakers with exponential holding
   times (mean 2 s, clamped to [0.5, 4] s), sometimes separated by a silent
   gap. Each speaker's envelope ``e`` is its activity under a 120 ms moving
   average.
2. Waveforms are white noise times the envelope plus a ``220 * (1 + id)`` Hz
   tone at 0.3 times the envelope (user id 0, agent id 1).
3. User head: jaw = 0.04 e_u + 0.002 noise; exp dims 0-4 = 0.5 e_u + AR(1)
   walk; other exp dims AR(1) walk; pose = 0.05 sin(2 pi 0.2 t + phase).
4. Agent head, the structure a model can learn: with ``l(t) = e_u(t - 5
   frames)``, ``r = smooth(l)`` (a causal exponential moving average) and a
   slow engagement ``g = ema(e_u, 2 s)``: exp dims 0-4 = 0.6 r + 0.3 e_a +
   0.3 g; exp dims 5-49 = a fixed linear mix of ``(r, e_a, g)`` plus a small
   AR(1) walk; jaw = 0.04 e_a; pose pitch = 0.08 l;
   other pose dims = 0.03 sin; plus N(0, 0.01^2) observation noise everywhere.

The lag and the engagement memory cross turn boundaries, so history turns
carry information about the current turn that the current turn alone lacks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import archive_read, archive_write
from .config import EXP_DIMS, HEAD_DIM, JAW_DIMS
from .rng import seeded_rng, stream_label

DURATION = 8.0
SAMPLE_RATE = 16000
FRAME_RATE = 25
PRE_ROLL = 1.0

HOLD_MEAN, HOLD_MIN, HOLD_MAX = 2.0, 0.5, 4.0
GAP_PROB, GAP_MEAN, GAP_MIN, GAP_MAX = 0.3, 0.4, 0.2, 1.0
SMOOTH_SECONDS = 0.12

LAG_FRAMES = 5
RESPONSE_TIME_CONSTANT = 3.0  # frames (120 ms), EMA of the lagged user envelope
ENGAGEMENT_TIME_CONSTANT = 50.0  # frames (2 s), EMA of the user envelope
ENGAGEMENT_WEIGHT = 0.3
WALK_PHI = 0.95
USER_WALK_SIGMA = 0.05
AGENT_WALK_SIGMA = 0.005
OBS_NOISE = 0.01

COUPLED_DIMS = slice(0, 5)
MIXED_DIMS = slice(5, EXP_DIMS)
# loadings of exp dims 5-49 on (response, agent envelope, engagement); shared by every sample
MIX_LOADINGS = seeded_rng(0, "datagen/loadings").normal(0.0, 0.15, (3, EXP_DIMS - 5))
JAW = slice(EXP_DIMS, EXP_DIMS + JAW_DIMS)
PITCH = EXP_DIMS + JAW_DIMS  # first pose dim
OTHER_POSE = slice(PITCH + 1, HEAD_DIM)

SPLITS = ("train", "val", "test")


@dataclass
class DialogueSample:
    user_wave: np.ndarray
    agent_wave: np.ndarray
    user_head: np.ndarray
    agent_head: np.ndarray
    sample_id: str = ""
    split: str = "train"
    seed: int | None = None
    # latent speech envelopes at the frame rate; absent for external data
    user_env: np.ndarray | None = field(default=None, repr=False)
    agent_env: np.ndarray | None = field(default=None, repr=False)

    @property
    def duration(self) -> float:
        return len(self.user_head) / FRAME_RATE


def _activity(rng: np.random.Generator, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    act = np.zeros((2, n_samples), dtype=np.float64)
    speaker = int(rng.integers(2))
    t = 0
    while t < n_samples:
        hold = float(np.clip(rng.exponential(HOLD_MEAN), HOLD_MIN, HOLD_MAX))
        end = min(n_samples, t + int(round(hold * SAMPLE_RATE)))
        act[speaker, t:end] = 1.0
        t = end
        if rng.random() < GAP_PROB:
            t += int(round(np.clip(rng.exponential(GAP_MEAN), GAP_MIN, GAP_MAX) * SAMPLE_RATE))
        speaker = 1 - speaker
    return act[0], act[1]


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    return np.convolve(x, np.ones(width) / width, mode="same")


def ar_walk(rng: np.random.Generator, n: int, dims: int, phi: float, sigma: float) -> np.ndarray:
    """AR(1) paths ``w[k] = phi w[k-1] + sigma xi`` started from the stationary law."""
    out = np.empty((n, dims))
    out[0] = rng.normal(0.0, sigma / np.sqrt(1 - phi**2), dims)
    xi = rng.normal(0.0, sigma, (n, dims))
    for k in range(1, n):
        out[k] = phi * out[k - 1] + xi[k]
    return out


def ema(x: np.ndarray, time_constant: float) -> np.ndarray:
    """Causal exponential moving average, started at ``x[0]``."""
    a = 1.0 / time_constant
    out = np.empty_like(x)
    out[0] = x[0]
    for k in range(1, len(x)):
        out[k] = out[k - 1] + a * (x[k] - out[k - 1])
    return out


def agent_response(lagged_user_env: np.ndarray) -> np.ndarray:
    return ema(lagged_user_env, RESPONSE_TIME_CONSTANT)


def _envelopes(rng: np.random.Generator, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    act_u, act_a = _activity(rng, n_samples)
    width = int(round(SMOOTH_SECONDS * SAMPLE_RATE))
    return _smooth(act_u, width), _smooth(act_a, width)


def _frame_centres(n_frames: int) -> np.ndarray:
    hop = SAMPLE_RATE // FRAME_RATE
    return np.arange(n_frames) * hop + hop // 2


def latent_envelopes(seed: int, duration: float = DURATION) -> tuple[np.ndarray, np.ndarray]:
    """Frame-rate speech envelopes of ``gen_sample(seed, duration)``, pre-roll included."""
    total_frames = int(round(PRE_ROLL * FRAME_RATE)) + int(round(duration * FRAME_RATE))
    env_u, env_a = _envelopes(seeded_rng(seed, "datagen"), total_frames * (SAMPLE_RATE // FRAME_RATE))
    return env_u[_frame_centres(total_frames)], env_a[_frame_centres(total_frames)]


def gen_sample(seed: int, duration: float = DURATION, sample_id: str = "", split: str = "train") -> DialogueSample:
    rng = seeded_rng(seed, "datagen")
    hop = SAMPLE_RATE // FRAME_RATE
    n_pre = int(round(PRE_ROLL * FRAME_RATE))
    total_frames = n_pre + int(round(duration * FRAME_RATE))
    n_samples = total_frames * hop
    env_u, env_a = _envelopes(rng, n_samples)

    t_audio = np.arange(n_samples) / SAMPLE_RATE
    waves = []
    for sid, env in enumerate((env_u, env_a)):
        noise = rng.uniform(-0.6, 0.6, n_samples)
        waves.append(env * noise + 0.3 * env * np.sin(2 * np.pi * 220.0 * (1 + sid) * t_audio))
    # stored as float32 on disk; round here so in-memory and on-disk samples agree
    user_wave, agent_wave = (w[n_pre * hop:].astype(np.float32) for w in waves)

    e_u, e_a = env_u[_frame_centres(total_frames)], env_a[_frame_centres(total_frames)]
    t = np.arange(total_frames) / FRAME_RATE

    user = np.zeros((total_frames, HEAD_DIM))
    user[:, :EXP_DIMS] = ar_walk(rng, total_frames, EXP_DIMS, WALK_PHI, USER_WALK_SIGMA)
    user[:, COUPLED_DIMS] += 0.5 * e_u[:, None]
    user[:, JAW] = 0.04 * e_u[:, None] + 0.002 * rng.standard_normal((total_frames, JAW_DIMS))
    phase = rng.uniform(0, 2 * np.pi, 3)
    user[:, PITCH:] = 0.05 * np.sin(2 * np.pi * 0.2 * t[:, None] + phase)

    lagged = np.concatenate([np.full(LAG_FRAMES, e_u[0]), e_u[:-LAG_FRAMES]])
    agent = np.zeros((total_frames, HEAD_DIM))
    agent[:, :EXP_DIMS] = ar_walk(rng, total_frames, EXP_DIMS, WALK_PHI, AGENT_WALK_SIGMA)
    response = agent_response(lagged)
    engagement = ema(e_u, ENGAGEMENT_TIME_CONSTANT)
    agent[:, COUPLED_DIMS] = (0.6 * response + 0.3 * e_a + ENGAGEMENT_WEIGHT * engagement)[:, None]
    agent[:, MIXED_DIMS] += np.stack([response, e_a, engagement], axis=1) @ MIX_LOADINGS
    agent[:, JAW] = 0.04 * e_a[:, None]
    agent[:, PITCH] = 0.08 * lagged
    phase = rng.uniform(0, 2 * np.pi, 2)
    agent[:, OTHER_POSE] = 0.03 * np.sin(2 * np.pi * 0.2 * t[:, None] + phase)
    agent += OBS_NOISE * rng.standard_normal(agent.shape)

    keep = slice(n_pre, None)
    return DialogueSample(
        user_wave=user_wave, agent_wave=agent_wave,
        user_head=user[keep], agent_head=agent[keep],
        sample_id=sample_id, split=split, seed=seed,
        user_env=e_u[keep], agent_env=e_a[keep],
    )


def sample_seed(seed: int, split: str, index: int) -> int:
    return int(seeded_rng(seed, stream_label("sample", split, index)).integers(0, 2**62))


def sample_arrays(sample: DialogueSample) -> list[tuple[str, np.ndarray]]:
    out = [
        ("user_wave", sample.user_wave.astype(np.float32)),
        ("agent_wave", sample.agent_wave.astype(np.float32)),
        ("user_head", np.asarray(sample.user_head, dtype=np.float64)),
        ("agent_head", np.asarray(sample.agent_head, dtype=np.float64)),
    ]
    if sample.user_env is not None:
        out += [("user_env", sample.user_env), ("agent_env", sample.agent_env)]
    return out


def gen_dataset(n_train: int, n_val: int, n_test: int, seed: int, out_dir, duration: float = DURATION) -> dict:
    """Write ``{id}.tmr`` archives plus ``manifest.json`` into ``out_dir``."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 0:
        raise ValueError("sample counts must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        for i in range(counts[split]):
            sid = f"{split}_{i:05d}"
            s = sample_seed(seed, split, i)
            sample = gen_sample(s, duration, sid, split)
            archive_write(sample_arrays(sample), out_dir / f"{sid}.tmr", attrs={"sample_id": sid, "split": split})
            entries.append({"id": sid, "split": split, "seed": s, "file": f"{sid}.tmr"})
    manifest = {
        "schema_version": 1,
        "generator": "timar.datagen",
        "seed": seed,
        "duration": duration,
        "sample_rate": SAMPLE_RATE,
        "frame_rate": FRAME_RATE,
        "samples": entries,
    }
    tmp = out_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out_dir / "manifest.json")
    return manifest


def load_sample(path, sample_id: str = "", split: str = "") -> DialogueSample:
    arrays = dict(archive_read(path))
    missing = {"user_wave", "agent_wave", "user_head", "agent_head"} - set(arrays)
    if missing:
        raise KeyError(f"{path}: missing arrays {sorted(missing)}")
    return DialogueSample(
        user_wave=arrays["user_wave"],
        agent_wave=arrays["agent_wave"],
        user_head=arrays["user_head"].astype(np.float64),
        agent_head=arrays["agent_head"].astype(np.float64),
        sample_id=sample_id, split=split,
        user_env=arrays.get("user_env"), agent_env=arrays.get("agent_env"),
    )


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_dataset(data_dir, split: str | None = None) -> list[DialogueSample]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    return [
        load_sample(data_dir / e["file"], e["id"], e["split"])
        for e in manifest["samples"]
        if split is None or e["split"] == split
    ]


def generate_split(n: int, seed: int, split: str = "train", duration: float = DURATION) -> list[DialogueSample]:
    """In-memory equivalent of one split of :func:`gen_dataset`."""
    return [gen_sample(sample_seed(seed, split, i), duration, f"{split}_{i:05d}", split) for i in range(n)]
