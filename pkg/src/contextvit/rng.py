"""Deterministic, named, splittable random streams.

Every random draw in the package goes through a Philox counter-based
generator keyed by a 64-bit seed.  Child streams are derived by hashing
the parent seed together with string/int labels, so independent
components (data generation, parameter init, batch shuffling) can be
re-seeded without coordinating counter offsets.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["child_seed", "generator", "randn"]


def child_seed(seed: int, *labels) -> int:
    """Derive a child seed from ``seed`` and a label path.

    Uses SHA-256 so the mapping is stable across platforms and Python
    processes (unlike PYTHONHASHSEED-dependent ``hash``).
    """
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed: int) -> np.random.Generator:
    """Philox generator for ``seed``; same seed, same stream, any platform."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed % (1 << 64))))


def randn(shape, seed: int, scale: float = 1.0) -> np.ndarray:
    """Seeded normal samples with standard deviation ``scale``.

    Rejects empty shapes, zero-sized dimensions and non-positive scales:
    a silent zero-size draw usually means a mis-built config.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("randn: shape must be non-empty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"randn: zero-sized dimension in shape {shape}")
    if not scale > 0:
        raise ValueError(f"randn: scale must be > 0, got {scale}")
    return generator(seed).standard_normal(shape) * float(scale)
