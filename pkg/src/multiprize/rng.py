"""Counter-based random streams derived from a single integer seed.

Each purpose gets its own Philox stream so that, e.g., drawing more data
never shifts the score initialization.
"""

import numpy as np

_PURPOSES = {
    "weights": 1,
    "scores": 2,
    "shuffle": 3,
    "data": 4,
    "split": 5,
    "random_mask": 6,
    "checkpoint": 7,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    key = (_PURPOSES[purpose], *(int(e) for e in extra))
    seq = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
