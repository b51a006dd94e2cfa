"""Seeded random generators.

Every stochastic op owns a ``numpy.random.Generator`` backed by PCG64. Child
seeds come from ``SeedSequence`` so that a run is reproducible from one
integer regardless of the order in which components draw.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 63-bit child seed from ``seed`` and hashable ``keys``."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).view(np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
