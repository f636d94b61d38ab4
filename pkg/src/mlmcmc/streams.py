"""Deterministic random streams.

A stream is identified by a 64-bit seed derived from ``(master_seed, level,
replica, ...)``. Streams use the counter-based Philox generator keyed by that
seed, so distinct keys give non-overlapping sequences.
"""
import numpy as np


def derive_seed(master_seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))
