"""Seeded random streams.

All randomness flows through Philox (a counter-based generator) keyed by a
root seed plus named stream labels, so every consumer draws from its own
independent, reproducible stream. String labels hash through SeedSequence's
documented entropy mixing; array-content streams key off a SHA-256 digest of
the raw bytes, making them stable under reordering of the surrounding code.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def philox_rng(seed: int, *labels) -> np.random.Generator:
    """Generator on an independent stream named by ``labels`` under ``seed``."""
    entropy = [int(seed)] + [_label_entropy(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def content_rng(seed: int, array: np.ndarray) -> np.random.Generator:
    """Stream keyed by array contents: identical data yields identical draws."""
    digest = hashlib.sha256(np.ascontiguousarray(array).tobytes()).digest()
    h0 = int.from_bytes(digest[:8], "little")
    h1 = int.from_bytes(digest[8:16], "little")
    return philox_rng(seed, h0, h1)


def content_jitter(seed: int, x: np.ndarray) -> np.ndarray:
    """Deterministic values in [-1, 1) keyed by each row's bytes separately,
    so a point's jitter does not depend on which batch it appears in."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    blocks = (d + 3) // 4
    prefix = int(seed).to_bytes(8, "little", signed=True)
    out = np.empty((n, blocks * 4))
    for i in range(n):
        row = np.ascontiguousarray(x[i]).tobytes()
        for b in range(blocks):
            digest = hashlib.sha256(prefix + row + b.to_bytes(4, "little")).digest()
            for j in range(4):
                u = int.from_bytes(digest[8 * j : 8 * j + 8], "little")
                out[i, b * 4 + j] = u / 2.0**63 - 1.0
    return out[:, :d]
