"""Seeded random streams.

One documented algorithm everywhere: numpy's PCG64 bit generator, seeded
through a SeedSequence. Each purpose ("init", "shuffle", "synthetic", ...)
gets its own derived stream so adding draws for one purpose never shifts
another. PCG64 output is platform independent.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64"


class Rng:
    """Root seed plus per-purpose derived generators."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)

    def stream(self, purpose: str, *keys: int) -> np.random.Generator:
        """Generator for ``purpose`` (and optional integer sub-keys, e.g. an epoch)."""
        spawn_key = (zlib.crc32(purpose.encode("utf-8")), *(int(k) for k in keys))
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={ALGORITHM})"
