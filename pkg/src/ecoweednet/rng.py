"""Seed fan-out.

A master seed is expanded into independent named streams. Each stream is a
Philox-4x64 counter-based generator whose 128-bit key is derived with the
SplitMix64 finaliser::

    k0 = splitmix64(seed ^ (STREAM_ID * 0x9E3779B97F4A7C15))
    k1 = splitmix64(k0 ^ 0xD1B54A32D192ED03)

with the usual SplitMix64 constants (increment 0x9E3779B97F4A7C15,
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Stream ids are
fixed below so that adding a stream never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

STREAM_IDS = {
    "init": 1,
    "shuffle": 2,
    "synth": 3,
    "split": 4,
    "subset": 5,
    "augment": 6,
}


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def stream_key(seed: int, name: str) -> tuple[int, int]:
    sid = STREAM_IDS.get(name)
    if sid is None:
        sid = 0x100 + zlib.crc32(name.encode("utf-8"))
    k0 = splitmix64((int(seed) & MASK64) ^ ((sid * GOLDEN) & MASK64))
    k1 = splitmix64(k0 ^ 0xD1B54A32D192ED03)
    return k0, k1


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` under master ``seed``."""
    k0, k1 = stream_key(seed, name)
    return np.random.Generator(np.random.Philox(key=[k0, k1]))
