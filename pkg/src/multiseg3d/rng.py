"""Deterministic, splittable random streams.

Every stochastic choice in the package draws from a Philox (counter-based)
generator derived from a root seed plus a tuple of key parts, so independent
subsystems never share or race a global stream. String parts are hashed with
blake2b; Python's salted ``hash`` is never used.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")


def make_rng(seed: int, *key) -> np.random.Generator:
    """Child generator fully determined by (seed, *key)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_part_to_int(p) for p in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stable_hash64(*parts) -> int:
    """64-bit hash of the parts, stable across processes and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")
