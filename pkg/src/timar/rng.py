"""Deterministic, label-addressed random streams.

Every random draw in the package comes from :func:`seeded_rng`. A stream is
identified by a 64-bit seed and a string label; the pair is hashed into the
key of a Philox counter-based generator, so the draw sequence does not depend
on platform, thread count, or the order in which streams are created.
"""

from __future__ import annotations

import hashlib

import numpy as np

RandomStream = np.random.Generator

_MASK64 = (1 << 64) - 1


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seeded_rng(seed: int, stream_label: str) -> RandomStream:
    seed = int(seed) & _MASK64
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_label_words(stream_label)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stream_label(*parts) -> str:
    """Join label parts, e.g. ``stream_label("noise", 3, 17) == "noise/3/17"``."""
    return "/".join(str(p) for p in parts)
