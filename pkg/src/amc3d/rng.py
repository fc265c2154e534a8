"""Seeded, splittable randomness.

Every stochastic component asks for its own generator by name, so adding a
new consumer never shifts the stream seen by an existing one.
"""
from __future__ import annotations

import os
import zlib

import numpy as np


def default_seed() -> int:
    return int(os.environ.get("AMC_SEED", "0"))


def _key(part: str | int) -> int:
    if isinstance(part, int):
        return part
    return zlib.crc32(part.encode("utf-8"))


def make_rng(seed: int | None, *keys: str | int) -> np.random.Generator:
    """Return a generator derived from ``seed`` and a path of component keys."""
    if seed is None:
        seed = default_seed()
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ``±bound·std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
