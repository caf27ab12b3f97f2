"""Pluggable randomness for reproducible runs.

Protocol code never calls os.urandom or the uuid module directly; it asks a
RandomSource. The default source is backed by os.urandom. Scenarios pass a
seeded source so that two runs with the same seed produce identical nonces,
ephemeral keys, and message UUIDs.
"""

from __future__ import annotations

import os
import random
import uuid
import zlib

__all__ = ["RandomSource"]


class RandomSource:
    """Byte/UUID generator, optionally seeded."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._rng = random.Random(seed) if seed is not None else None

    def bytes(self, n: int) -> bytes:
        if self._rng is None:
            return os.urandom(n)
        return self._rng.randbytes(n)

    def uuid4(self) -> uuid.UUID:
        # version/variant bits forced, so seeded output is still a valid v4
        return uuid.UUID(bytes=self.bytes(16), version=4)

    def child(self, label: str) -> "RandomSource":
        """Derived source with an independent stream, stable per label."""
        if self.seed is None:
            return RandomSource()
        # crc32 rather than hash(): str hashing is salted per process
        mix = zlib.crc32(label.encode("utf-8"))
        return RandomSource((self.seed * 0x9E3779B1 + mix) & 0x7FFFFFFF)
