"""Stable seed derivation.

Seeds for sub-jobs are derived by hashing the parent seed with a key path,
so results never depend on job ordering or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys) -> int:
    """Hash ``seed`` and ``keys`` into an unsigned 64-bit seed."""
    text = "\x1f".join([str(int(seed) & _MASK64)] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.default_rng(int(seed) & _MASK64)
