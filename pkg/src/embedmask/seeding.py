"""Deterministic cross-platform randomness: PCG64 + splitmix64 streams."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """The splitmix64 finalizer; the documented seed-mixing function."""
    z = (z + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stream_seed(seed: int, stream: int = 0) -> int:
    """Element ``stream`` of the splitmix64 stream rooted at ``seed``."""
    return splitmix64((seed + stream * _GAMMA) & _MASK64)


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator on an independent splitmix64-derived stream."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, stream)))
