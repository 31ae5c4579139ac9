"""Counter-based random streams.

Every consumer of randomness derives a stateless Philox generator from a
``(seed, purpose, index)`` key. Same key, same variates — which is what makes
two-pass gradient estimators replay a batch exactly and lets diagnostic
batches run in any order. Distinct purposes keep training noise, initial
points, evaluation data and diagnostics independent of each other.
"""

from __future__ import annotations

import numpy as np

# stable small codes so keys do not depend on python string hashing
_PURPOSES = {
    "init": 1,        # initial points (xi, tau) of a training batch
    "path": 2,        # Brownian increments of a training batch
    "eval": 3,        # evaluation samples
    "diag-init": 4,   # initial points of a variance-diagnostic batch
    "diag-path": 5,   # path noise of a variance-diagnostic batch
    "net-init": 6,    # parameter initialization
    "ref": 7,         # reference-solution sampling (inner Monte Carlo)
}


def purpose_code(purpose: str) -> int:
    try:
        return _PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose '{purpose}'") from None


def generator(seed: int, purpose: str, index: int) -> np.random.Generator:
    """Fresh generator for the stream keyed by (seed, purpose, index)."""
    key = np.random.SeedSequence((int(seed), purpose_code(purpose), int(index)))
    return np.random.Generator(np.random.Philox(key))


def normals(seed: int, purpose: str, index: int, shape) -> np.ndarray:
    """One-shot standard-normal tensor for a key; replayable bit-for-bit."""
    return generator(seed, purpose, index).standard_normal(shape)
