"""Seeded random streams.

Every stochastic choice draws from a stream keyed by ``(seed, purpose, *extra)``.
The key is hashed with SHA-256 into a :class:`numpy.random.SeedSequence` that
feeds a PCG64 bit generator, so a stream depends only on its key and never on
the order in which other streams were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(seed: int, purpose: str, extra: tuple[int, ...]) -> list[int]:
    text = f"{int(seed)}|{purpose}|" + ",".join(str(int(e)) for e in extra)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, purpose, *extra)``."""
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(_key_words(seed, purpose, extra))
    return np.random.Generator(np.random.PCG64(ss))
