"""Named, counter-based random streams derived from one 64-bit seed.

``derive_rng(seed, "noise", 3)`` always yields the same Philox stream,
independent of which other streams were drawn before it.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_rng(seed: int, *path) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
