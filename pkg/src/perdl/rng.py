"""Seeded random streams.

All randomness goes through NumPy's Philox-4x64 counter-based bit generator,
keyed by a :class:`numpy.random.SeedSequence` built from the user seed plus a
tuple of integer stream tags. Philox output is platform independent, so a
given ``(seed, tags)`` pair reproduces the same draws everywhere.
"""

from __future__ import annotations

import numpy as np

# stream tags, kept stable so fixtures reproduce across versions
GLOBAL_BASIS = 1
LOCAL_BASIS = 2
CODES = 3
PERTURB = 4
WARM_START = 5
SPLIT = 6
BETA = 7


def stream(seed: int, *tags: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(t) for t in tags)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def random_orthogonal(rng: np.random.Generator, d: int, r: int | None = None) -> np.ndarray:
    """``d x r`` matrix with orthonormal columns from a sign-fixed QR of a Gaussian."""
    r = d if r is None else r
    if r > d:
        raise ValueError(f"cannot build {r} orthonormal columns in dimension {d}")
    G = rng.standard_normal((d, r))
    Q, R = np.linalg.qr(G)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s
