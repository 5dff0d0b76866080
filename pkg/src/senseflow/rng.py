"""Seeded random streams.

Every random draw in senseflow comes from a named substream of one 64-bit
seed: numpy's PCG64 bit generator fed by a SeedSequence whose spawn key is
the CRC-32 of the stream name. Streams are independent of the order in which
they are requested, so adding a new consumer never shifts existing data.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


STREAM_PHANTOM = "phantom"
STREAM_MOTION = "motion"
STREAM_COILS = "coils"
STREAM_NOISE = "noise"


@dataclass(frozen=True)
class Rng:
    seed: int

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def generator(self, stream: str) -> np.random.Generator:
        """Fresh generator for ``stream``; identical on every call and platform."""
        key = zlib.crc32(stream.encode("utf-8"))
        sequence = np.random.SeedSequence(self.seed, spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(sequence))

    def child(self, stream: str) -> Rng:
        """Derived seed for a nested consumer (e.g. one noise draw per dataset variant)."""
        value = self.generator(stream).integers(0, 2 ** 63, dtype=np.int64)
        return Rng(int(value))
