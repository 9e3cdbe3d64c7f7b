"""Seedable counter-based random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``.  Streams
are Philox-backed so independent sub-streams can be derived from a master seed
by counter, which keeps batched work independent of scheduling.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed=0) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def substream(seed: int, *counter: int) -> np.random.Generator:
    """Stream number ``counter`` derived from ``seed``; stable across runs."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counter])))


def fork(rng: np.random.Generator) -> np.random.Generator:
    """A child stream whose seed is drawn from ``rng`` (advances ``rng`` once)."""
    return substream(int(rng.integers(0, 2**63 - 1)))


def state_to_json(rng: np.random.Generator) -> dict:
    """Bit-generator state with arrays turned into tagged integer lists."""
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__array__": [int(x) for x in v.reshape(-1)], "dtype": v.dtype.name}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return int(v) if isinstance(v, np.integer) else v
    return conv(rng.bit_generator.state)


def set_state_json(rng: np.random.Generator, state: dict) -> None:
    def conv(v):
        if isinstance(v, dict) and "__array__" in v:
            return np.array(v["__array__"], dtype=v["dtype"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    rng.bit_generator.state = conv(state)
