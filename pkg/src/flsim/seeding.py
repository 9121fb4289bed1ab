"""Seed derivation: every random draw in a run flows from one master seed."""

import numpy as np

from .flpk import fnv1a_64

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
STREAMS = ("init", "data", "shuffle", "split")


def splitmix64(state: int) -> int:
    z = (state + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream_label: str, index: int) -> int:
    """Independent 64-bit seed for ``(stream_label, index)`` under ``master``."""
    state = ((master & MASK64) ^ fnv1a_64(stream_label.encode("utf-8")))
    state = (state + (index & MASK64) * GOLDEN) & MASK64
    return splitmix64(state)


def rng_for(master: int, stream_label: str, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stream_label, index))
