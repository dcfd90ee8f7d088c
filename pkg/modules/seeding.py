"""Hierarchical seeding: one run seed, one independent generator per purpose."""

import zlib

import numpy as np


def make_rng(seed: int, *purpose: str) -> np.random.Generator:
    """Generator derived from `seed` and a purpose path such as ("mae", "mask")."""
    words = [zlib.crc32(part.encode("utf-8")) for part in purpose]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))
