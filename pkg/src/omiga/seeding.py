"""Named random sub-streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the stream ``name`` (e.g. "data", "init", "batch", "eval")."""
    return np.random.default_rng(_sequence(seed, name))


def spawn(seed: int, name: str, count: int) -> list[np.random.Generator]:
    """``count`` independent generators, one per episode of stream ``name``."""
    return [np.random.default_rng(s) for s in _sequence(seed, name).spawn(count)]
