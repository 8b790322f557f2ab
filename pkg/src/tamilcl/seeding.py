"""Named per-purpose random streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(seed: int, purpose: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(purpose.encode()),))


def child_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``purpose`` ("init", "data", "buffer", "ema", ...)."""
    return np.random.default_rng(child_seed(seed, purpose))
