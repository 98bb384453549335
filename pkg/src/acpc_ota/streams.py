"""Keyed random streams.

Every consumer of randomness gets its own generator derived from
``(seed, purpose, *key)`` so results do not depend on call order.
"""

from __future__ import annotations

import numpy as np

CLIENT = 1
NOISE = 2
GAINS = 3
INIT = 4
PARTITION = 5
PROBE = 6
ORACLE = 7


def stream(seed: int, purpose: int, *key: int) -> np.random.Generator:
    entropy = [int(seed), int(purpose), *(int(k) for k in key)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
