"""Counter-based random streams keyed by integer tuples.

A stream for ``(seed, client, round)`` is the same no matter which other
streams were drawn before it, so client updates can run in any order.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed), *(int(k) for k in keys)]
    if any(k < 0 for k in entropy):
        raise ValueError("seeds and stream keys must be nonnegative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# Domain tags so that e.g. the init stream never collides with a client stream.
INIT = 1
SAMPLING = 2
HOLDOUT = 3
PROBE = 4
