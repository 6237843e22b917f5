"""Seeded, splittable pseudorandom streams.

Every consumer of randomness asks for its own named stream so that adding a
draw in one place never shifts the numbers seen anywhere else.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name & _MASK64
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; same pair, same numbers."""
    seq = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(stream_id(stream),))
    return np.random.Generator(np.random.PCG64(seq))
