"""Seeded, splittable random streams.

Every random draw descends from one unsigned 64-bit root seed. A stream is
addressed by the root seed plus a path of string labels::

    key    = SeedSequence([seed & 0xffffffff, seed >> 32, crc32(label_0), ...])
                 .generate_state(2, uint64)
    stream = Generator(Philox(key=key))

Philox is counter-based, so a stream is fully defined by its key and the
number of values already drawn. ``tests/data/rng_vectors.csv`` pins the first
outputs of several streams; any reimplementation must reproduce them.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch

from .grid import DTYPE

U64_MAX = (1 << 64) - 1


class Stream:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) <= U64_MAX:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        entropy += [zlib.crc32(p.encode("utf-8")) for p in self.path]
        key = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels: str) -> "Stream":
        return Stream(self.seed, self.path + tuple(str(x) for x in labels))

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.gen.standard_normal(shape, dtype=np.float64))

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.gen.random(shape, dtype=np.float64))

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def raw_u64(self, n: int) -> np.ndarray:
        return self.gen.integers(0, U64_MAX, size=n, dtype=np.uint64, endpoint=True)


def stream(seed: int, *labels: str) -> Stream:
    return Stream(seed, tuple(labels))


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)
