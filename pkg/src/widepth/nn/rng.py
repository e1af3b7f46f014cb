"""Seeded, counter-based random streams.

Backed by numpy's Philox bit generator, whose output depends only on the
key and the counter, so a given seed reproduces the same stream on every
platform numpy supports.
"""
import hashlib

import numpy as np


def _key(seed, labels):
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """Deterministic random stream identified by a 64-bit seed.

    ``child(*labels)`` derives an independent stream from the parent seed and
    the labels, without consuming the parent stream. This is how per-window
    and per-layer streams are split off.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *labels):
        return Rng(_key(self.seed, labels))

    def normal(self, shape=(), dtype=np.float64):
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed})"
