"""Derived RNG streams so every stage of a run is independently re-derivable.

Streams are keyed by (seed, purpose, position); resuming from a layer
boundary therefore replays the exact shuffles an uninterrupted run
would have used, with no serialized RNG state.
"""

from __future__ import annotations

import numpy as np

INIT, CLUSTER, CODEBOOK, SHUFFLE, RESEED = range(5)


def rng_for(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
