"""Deterministic per-purpose random streams.

Every stochastic choice in the engine (batch order, view perturbations,
mix pairings, noise partners, ...) pulls from its own generator derived
from the run seed plus a purpose tag. Streams are independent, so a code
path that skips one kind of draw never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Return an independent generator for (seed, *tags).

    Tags may be strings (hashed with crc32, stable across processes) or
    non-negative ints such as epoch and batch counters.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [seed]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            value = int(tag)
            if value < 0:
                raise ValueError(f"integer tags must be non-negative, got {value}")
            entropy.append(value)
    return np.random.default_rng(np.random.SeedSequence(entropy))
