"""Seeded random streams.

Backed by numpy's PCG64 bit generator. Normal samples use numpy's ziggurat
method (``Generator.standard_normal``), so results are bit-identical for a
given seed on one numpy build. Substreams are derived by hashing the parent
seed together with a string/int key through ``SeedSequence``; the parent
stream state is not consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_words(key) -> list[int]:
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class Rng:
    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed) & _MASK64
        self._path = _path
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for key in _path:
            entropy.extend(_key_words(key))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def spawn(self, key) -> "Rng":
        """Independent child stream named by ``key``; same key, same stream."""
        return Rng(self.seed, self._path + (key,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape=(), std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=dtype)
        if std != 1.0:
            out *= np.asarray(std, dtype=out.dtype)
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
