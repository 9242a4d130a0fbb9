"""Deterministic RNG substreams derived from one user-visible seed.

Every source of randomness in the pipeline (data generation, weight init,
batch shuffling, train/holdout splitting) draws from its own named stream so
ablations can vary one factor at a time while sharing the rest.
"""
from __future__ import annotations

import numpy as np

_STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3}


def substream(seed: int, name: str, extra: tuple[int, ...] = ()) -> np.random.Generator:
    """Independent generator for a named stream under one root seed."""
    try:
        key = _STREAMS[name]
    except KeyError:
        raise KeyError(f"unknown RNG stream {name!r}; expected one of {sorted(_STREAMS)}") from None
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key, *extra)))
