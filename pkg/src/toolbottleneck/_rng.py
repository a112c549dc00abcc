"""Seed derivation so every random stream is a pure function of the run seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key: object) -> int:
    if isinstance(key, (int, np.integer)) and int(key) >= 0:
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys: object) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    ss = np.random.SeedSequence([_key_to_int(k) for k in keys])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


def rng_stream(*keys: object) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key_to_int(k) for k in keys]))
