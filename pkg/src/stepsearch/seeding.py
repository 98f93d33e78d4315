"""Seed plumbing shared by every stochastic operation."""

from __future__ import annotations

import zlib

import numpy as np


def as_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed for ``(seed, *keys)``.

    String keys are hashed with crc32 so the result does not depend on
    ``PYTHONHASHSEED``.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode()))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
