"""Keyed random streams.

Every stream is a pure function of the master seed, a purpose tag and integer
keys such as (round, slot), so the order in which work is executed never
changes which random numbers it sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def derive_seed(master_seed: int, tag: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(tag_key(tag), *map(int, keys)))


def stream(master_seed: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, tag, *keys)))
