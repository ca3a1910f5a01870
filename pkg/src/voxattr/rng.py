"""Deterministic random-stream derivation.

Every stochastic operation in the toolkit draws from a generator built out of
an :class:`RngSpec`. Identical specs always expand to identical draws, and
sub-streams are derived with a stable FNV-1a hash of a path of labels, so a
rerun with the same root seed reproduces every intermediate result bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a UTF-8 string."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class RngSpec:
    """Seed plus stream identifier for a reproducible random stream."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *parts: object) -> "RngSpec":
        """Derive a sub-stream keyed on a label path.

        The stream id of the child is FNV-1a("<parent stream hex>/<parts
        joined by '/'>"), which keeps sibling streams independent and the
        whole tree a pure function of the root seed.
        """
        label = "/".join(str(p) for p in parts)
        mixed = fnv1a64(f"{self.stream_id:016x}/{label}")
        return RngSpec(self.seed, mixed)
