"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

EXP_DIMS = 50
JAW_DIMS = 3
POSE_DIMS = 3
HEAD_DIM = EXP_DIMS + JAW_DIMS + POSE_DIMS

# (name, slice) of each FLAME component inside a 56-dim head frame
COMPONENTS = {
    "exp": slice(0, EXP_DIMS),
    "jaw": slice(EXP_DIMS, EXP_DIMS + JAW_DIMS),
    "pose": slice(EXP_DIMS + JAW_DIMS, HEAD_DIM),
}


class ConfigError(ValueError):
    """Raised for unparsable config files or invariant violations.

    ``key`` names the offending field and ``line`` the 1-based line number
    when the error came from a file.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key {key!r}")
        super().__init__(f"{': '.join(prefix)}: {message}" if prefix else message)


@dataclass(frozen=True)
class ModelConfig:
    # shared token space and fusion encoder
    d_t: int = 1024
    d_e: int = 1024
    encoder_layers: int = 16
    encoder_heads: int = 16
    # diffusion head
    d_m: int = 1024
    K_blocks: int = 3
    d_h: int = HEAD_DIM
    # signal rates
    f_s: int = 16000
    f_h: int = 25
    f_w: int = 50
    d_raw: int = 512
    c: float = 1.0
    N_max: int = 8
    # training recipe
    r: float = 0.7
    p_cfg: float = 0.1
    diff_train_steps: int = 1000
    diff_sample_steps: int = 100
    diff_batch_mul: int = 1  # noise draws per masked frame and step
    omega: float = 1.0
    batch_size: int = 32
    epochs: int = 400
    lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    precision: str = "f32"

    def __post_init__(self):
        validate(self)

    @property
    def K_frames(self) -> int:
        return int(round(self.c * self.f_h))

    @property
    def chunk_samples(self) -> int:
        return int(round(self.c * self.f_s))

    @property
    def turn_len(self) -> int:
        """Flat tokens per interleaved turn (four blocks plus ten separators)."""
        return 4 * self.K_frames + 10

    @property
    def max_len(self) -> int:
        return self.N_max * self.turn_len

    @property
    def raw_rows(self) -> int:
        return int(round(self.c * self.f_w)) - 1

    @property
    def torch_dtype(self):
        import torch

        return torch.float64 if self.precision == "f64" else torch.float32

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: ModelConfig) -> None:
    positive = [
        "d_t", "d_e", "encoder_layers", "encoder_heads", "d_m", "K_blocks",
        "f_s", "f_h", "f_w", "d_raw", "N_max", "diff_train_steps",
        "diff_sample_steps", "diff_batch_mul", "batch_size",
    ]
    for key in positive:
        if getattr(cfg, key) <= 0:
            raise ConfigError("must be positive", key=key)
    if cfg.d_h != HEAD_DIM:
        raise ConfigError(f"head dimension is fixed at {HEAD_DIM} (50 exp + 3 jaw + 3 pose)", key="d_h")
    if cfg.c <= 0:
        raise ConfigError("must be positive", key="c")
    if not math.isclose(cfg.c * cfg.f_h, round(cfg.c * cfg.f_h), abs_tol=1e-9):
        raise ConfigError(f"c * f_h = {cfg.c * cfg.f_h} is not an integer", key="c")
    if not math.isclose(cfg.c * cfg.f_s, round(cfg.c * cfg.f_s), abs_tol=1e-9):
        raise ConfigError("c * f_s is not an integer", key="c")
    if cfg.d_e % cfg.encoder_heads:
        raise ConfigError("d_e must be divisible by encoder_heads", key="encoder_heads")
    if cfg.d_t % cfg.encoder_heads:
        raise ConfigError("d_t must be divisible by encoder_heads", key="encoder_heads")
    if cfg.d_t % 2:
        raise ConfigError("must be even", key="d_t")
    if not 0 < cfg.r <= 1:
        raise ConfigError(f"{cfg.r} not in (0, 1]", key="r")
    if not 0 <= cfg.p_cfg < 1:
        raise ConfigError(f"{cfg.p_cfg} not in [0, 1)", key="p_cfg")
    if cfg.diff_sample_steps > cfg.diff_train_steps:
        raise ConfigError("exceeds diff_train_steps", key="diff_sample_steps")
    if cfg.lr < 0:
        raise ConfigError("must be non-negative", key="lr")
    if cfg.warmup_steps < 0 or cfg.epochs < 0:
        raise ConfigError("must be non-negative", key="warmup_steps" if cfg.warmup_steps < 0 else "epochs")
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError("must be 'f32' or 'f64'", key="precision")


_FIELD_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _coerce(key: str, text: str, line: int | None = None):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            value = float(text)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind}", key=key, line=line) from None


def parse_config(text: str) -> ModelConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key=value, got {stripped!r}", line=lineno)
        key, _, value = (part.strip() for part in stripped.partition("="))
        if key not in _FIELD_TYPES:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        values[key] = _coerce(key, value, lineno)
    return ModelConfig(**values)


def load_config(path: str | os.PathLike) -> ModelConfig:
    """Read a ``key=value`` config file; absent keys take their defaults."""
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ModelConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(values: dict) -> ModelConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return ModelConfig(**values)
