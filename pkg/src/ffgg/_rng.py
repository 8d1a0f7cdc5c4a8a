"""Seeded random streams.

All randomness goes through Philox, a counter-based 64-bit generator, so a
given ``(seed, *stream)`` key reproduces the same draws on every platform.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and an optional stream path.

    Distinct stream paths give statistically independent generators, which
    lets callers derive per-round or per-client generators without sharing
    state.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
