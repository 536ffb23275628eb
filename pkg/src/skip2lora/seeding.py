"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator keyed by
``SeedSequence([seed, stream])``; PCG64 output is specified bit-for-bit, so
runs reproduce across platforms.
"""
import numpy as np

INIT = 0
SAMPLING = 1
DATA = 2


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), which])))
