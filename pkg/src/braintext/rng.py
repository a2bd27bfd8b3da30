"""Seed plumbing.

Every random draw in the package flows from a single root seed through a
named substream, so any component can be re-derived in isolation and the
whole pipeline replays bit-identically.
"""

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the substream `name` under `root_seed`.

    The name is folded to a 32-bit key with crc32, which is stable across
    platforms and python versions (unlike hash()).
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([root_seed, key]))


def stable_index(name: str, n: int) -> int:
    """Deterministic index in [0, n) derived from a string, seed-free."""
    if n <= 0:
        raise ValueError("n must be positive")
    return zlib.crc32(name.encode("utf-8")) % n
