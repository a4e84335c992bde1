"""Deterministic seed derivation.

Every randomized stage (data generation, client sampling, model init,
batching, probing, budgets) draws from its own child stream of one master
seed, so changing how one stage consumes randomness never perturbs the
others. Streams are addressed by a path of ints and/or strings; strings are
hashed with sha256 so the mapping is stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_component(value) -> int:
    if isinstance(value, (bool, float)):
        raise TypeError(f"rng path components must be ints or strings, got {value!r}")
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise ValueError(f"rng path components must be non-negative, got {value}")
        return int(value)
    if isinstance(value, str):
        digest = hashlib.sha256(value.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng path components must be ints or strings, got {value!r}")


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    key = tuple(_path_component(p) for p in path)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)


def child_rng(master_seed: int, *path) -> np.random.Generator:
    """Generator for the stream addressed by (master_seed, *path)."""
    return np.random.default_rng(seed_sequence(master_seed, *path))


def derive_seed(master_seed: int, *path) -> int:
    """Collapse a stream address into a plain integer seed."""
    state = seed_sequence(master_seed, *path).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
