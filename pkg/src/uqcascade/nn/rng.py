"""Deterministic random streams.

A stream is (seed, draw counter). Identical seed plus identical call
sequence reproduces identical draws; ``child(key)`` derives an independent
stream so concurrent evaluations each own their randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key) & 0xFFFFFFFFFFFFFFFF


class RngState:
    """Counted wrapper around a PCG64 generator."""

    __slots__ = ("seed", "counter", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, key) -> "RngState":
        """Independent stream derived from this seed and a label."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_key_to_int(key),))
        return RngState(int(ss.generate_state(1, np.uint64)[0]))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high=None, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        self.counter += 1
        return self._gen.choice(n, size=k, replace=replace)

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"
