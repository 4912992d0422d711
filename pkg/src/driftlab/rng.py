"""Named random streams derived from one master seed.

Every noise source (return noise, drift noise, arrivals, marks, the
regularizing Brownian motion, ...) draws from its own generator.  A stream is
identified by ``(name, counter)`` and seeded from a hash of the name, so adding
a new stream never perturbs the existing ones, and two simulations built from
the same master seed consume identical noise for the streams they share.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, counter: int = 0) -> np.random.Generator:
    """Return the generator for ``(name, counter)`` under master ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), int(counter)))
    return np.random.Generator(np.random.PCG64(ss))


class Streams:
    """Lazily created family of named generators sharing one master seed."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)
        self._cache: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._cache.get(name)
        if gen is None:
            gen = stream(self.seed, name, self.counter)
            self._cache[name] = gen
        return gen

    def child(self, counter: int) -> "Streams":
        """Streams for chunk/bundle number ``counter`` of the same master seed."""
        return Streams(self.seed, counter)


def derive_seed(seed: int, name: str, counter: int = 0) -> int:
    """A 63-bit master seed for a sub-run, derived like any other stream."""
    return int(stream(seed, name, counter).integers(0, 2 ** 63))
