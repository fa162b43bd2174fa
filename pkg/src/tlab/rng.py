"""Deterministic random streams.

Every stream is a Philox-4x64 counter-based generator whose 128-bit key is
derived from ``(seed, name)`` with SHA-256, so the same pair yields the same
draws on any platform and independent of the order in which streams are
created.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def stream(seed: int, name: str = "") -> np.random.Generator:
    """Return a fresh generator for the named stream under ``seed``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, name)))


def derive_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed for a child job, stable across platforms."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
