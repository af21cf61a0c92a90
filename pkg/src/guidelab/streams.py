"""Deterministic RNG stream derivation.

All randomness in the package flows through numpy Generators derived from
integer keys via SeedSequence. Streams keyed by (seed, *indices) are
independent of evaluation order, which keeps populations and corruption
draws reproducible regardless of batching.
"""
from __future__ import annotations

import numpy as np


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
