"""Named random streams derived from one 64-bit seed.

Each purpose ("init", "data", "order", "textures", ...) gets an independent
generator, so perturbing one consumer leaves the others untouched.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))
