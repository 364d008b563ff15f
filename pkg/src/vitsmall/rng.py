"""Counter-based random streams.

Every consumer derives its own Philox stream from ``(seed, *keys)`` so that
draws never depend on how many other streams were used before, or on how
work is split across loader workers.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode())


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: tuple = ()

    def child(self, *keys) -> "RngState":
        return RngState(self.seed, self.stream + tuple(keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in self.stream))
        return np.random.Generator(np.random.Philox(ss))


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream named by ``keys`` under ``seed``."""
    return RngState(int(seed), tuple(keys)).generator()
