"""Counter-based random streams keyed by (seed, key...).

Every stream is a Philox generator seeded from a SeedSequence whose spawn
key carries the structural keys (node kind/index, sample index, block
index), so results never depend on scheduling or worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) & _MASK64 for k in keys))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed."""
    return int(seed_sequence(seed, *keys).generate_state(1, np.uint64)[0])


def generator(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))
