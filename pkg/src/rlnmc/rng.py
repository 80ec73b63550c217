"""Deterministic random streams keyed by ``(seed, replica, purpose)``."""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 0,
    "mc": 1,
    "backbone": 2,
    "action": 3,
    "shuffle": 4,
    "params": 5,
    "bootstrap": 6,
    "instance": 7,
}


def stream(seed: int, replica: int = 0, purpose: str = "mc", *extra: int) -> np.random.Generator:
    """Counter-based Philox generator independent of every other key."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(replica), PURPOSES[purpose], *map(int, extra)])
    return np.random.Generator(np.random.Philox(ss))
