"""Seed splitting for reproducible Monte Carlo runs.

Every random draw in the package comes from a generator derived from the
master seed and a key path, e.g. ``(trial, Purpose.NOISE)``. The derivation
is ``numpy.random.SeedSequence(master_seed, spawn_key=key)`` feeding a PCG64
bit generator, so a stream depends only on its key and never on the order in
which trials are executed.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    """Purpose codes used as the last element of a stream key."""

    CHANNEL = 0
    NOISE = 1
    PILOT = 2
    SGD = 3
    SYMBOLS = 4
    SPLIT = 5
    DATA = 6
    INIT = 7


def generator(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for ``key`` under master ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


class Streams:
    """A node in the key tree.

    >>> s = Streams(7).child(3)
    >>> a = s.rng(Purpose.NOISE).standard_normal()
    >>> b = Streams(7, (3,)).rng(Purpose.NOISE).standard_normal()
    >>> a == b
    True
    """

    __slots__ = ("seed", "key")

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)

    def child(self, *key: int) -> "Streams":
        return Streams(self.seed, self.key + tuple(key))

    def rng(self, purpose: Purpose, *extra: int) -> np.random.Generator:
        return generator(self.seed, *self.key, int(purpose), *extra)

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, key={self.key})"
