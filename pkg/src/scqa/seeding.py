"""Stable, platform-independent seed derivation.

Python's builtin hash() is salted per process, so every derived seed goes
through blake2b instead. Derived seeds feed numpy PCG64 generators.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash(*parts: object) -> int:
    """64-bit hash of the parts, identical across runs and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def derived_rng(*parts: object) -> np.random.Generator:
    """Generator seeded from stable_hash of the parts."""
    return np.random.Generator(np.random.PCG64(stable_hash(*parts)))


def unit_float(*parts: object) -> float:
    """Deterministic uniform draw in [0, 1) keyed by the parts."""
    return stable_hash(*parts) / 2.0**64
