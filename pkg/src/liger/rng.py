"""Seeded counter-based random streams.

Every random draw in the toolkit flows through an `Rng` so that a single
64-bit seed pins the whole run. Philox is counter-based and produces the
same stream on every platform; children are derived through
`SeedSequence.spawn_key`, so independently named streams never collide
and never depend on draw order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


class Rng:
    """Deterministic splittable random stream (Philox under the hood)."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = _spawn_key
        seq = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *tags: str | int) -> "Rng":
        """Independent stream addressed by name, e.g. rng.child("init", "layer0.wq")."""
        key = self.spawn_key + tuple(_tag_key(t) for t in tags)
        return Rng(self.seed, _spawn_key=key)

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
