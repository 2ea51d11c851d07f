"""Seeded random streams.

Every random object in the package comes from a Philox (counter-based)
generator keyed by a 64-bit seed.  Replica and purpose substreams are
derived by hashing ``(seed, replica, purpose)`` through ``SeedSequence``, so
the disorder of replica 3 never overlaps the magnetization draws of replica 3
or the disorder of replica 4.
"""

from __future__ import annotations

import numpy as np

DISORDER = 0
MAGNETIZATION = 1

_MASK64 = (1 << 64) - 1


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


def derive_seed(seed: int, replica: int, purpose: int = DISORDER) -> int:
    """64-bit substream seed for ``(seed, replica, purpose)``."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, int(replica), int(purpose)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
