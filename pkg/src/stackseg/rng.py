"""Deterministic random streams.

Every random draw in the package comes from a counter-based Philox
generator keyed by (seed, purpose tag), so streams are independent,
order-insensitive, and reproducible across runs on a platform.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    """Independent generator for a (seed, tag) pair."""
    digest = hashlib.blake2s(
        f"{int(seed)}|{tag}".encode("utf-8"), digest_size=16
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def derive_seed(seed: int, tag: str) -> int:
    """Stable non-negative sub-seed for APIs that accept plain integers."""
    digest = hashlib.blake2s(
        f"{int(seed)}|{tag}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") >> 1
