"""Seeded, splittable random streams.

Every stream is numpy's PCG64 bit generator (PCG XSL-RR 128/64) seeded
through ``numpy.random.SeedSequence(entropy=seed, spawn_key=key)``. The
``key`` is a tuple of non-negative integers naming the stream, e.g.
``(STREAM_EPISODE, index)``. Two different keys under the same seed give
statistically independent streams, and a stream depends only on
``(seed, key)``, never on how many other streams were drawn before it.
"""

from __future__ import annotations

import numpy as np

# first element of every spawn key; keeps unrelated consumers apart
STREAM_SYNTH = 0
STREAM_EPISODE = 1
STREAM_TRAIN = 2

U64_MAX = 2**64 - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream named ``key`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
