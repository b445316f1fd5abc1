"""Deterministic seed splitting.

``derive_seed(master, *path)`` hashes a path of labels (strings or ints) into
a ``SeedSequence`` together with the master seed and returns a 64-bit integer.
Every random stream in a run is derived from the run's master seed this way,
e.g. ``derive_seed(seed, "env")`` or ``derive_seed(seed, "agent", 0)``.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(x) -> int:
    if isinstance(x, (int, np.integer)):
        return int(x) & 0xFFFFFFFF
    return zlib.crc32(str(x).encode("utf-8"))


def derive_seed(master: int, *path) -> int:
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF, *map(_label, path)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


class SeedStream:
    """Endless deterministic sequence of seeds, e.g. one per network reset."""

    def __init__(self, master: int, *path):
        self.master = int(master)
        self.path = path
        self.drawn = 0

    def next(self) -> int:
        s = derive_seed(self.master, *self.path, self.drawn)
        self.drawn += 1
        return s
