"""Deterministic RNG stream derivation.

One master seed fans out to independent streams keyed by a purpose string
and an index, so e.g. trial i always sees the same stream no matter how
many trials run around it.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(master_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    entropy = [int(master_seed), zlib.crc32(purpose.encode("utf-8")), int(index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
