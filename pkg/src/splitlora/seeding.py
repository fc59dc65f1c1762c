"""Sub-seed derivation.

Every random stream in a run is ``numpy.random.default_rng(derive(seed, *path))``
where ``derive`` folds each path element into the root seed with the
SplitMix64 finaliser. Streams are addressed by position, so drawing more
samples from stream ``k`` never shifts stream ``k - 1``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1

# stream names used across the package
LORA_INIT = 1
TRAIN_NOISE = 2
SAMPLE_NOISE = 3


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *path: int) -> int:
    s = splitmix64(int(seed) & _MASK)
    for p in path:
        s = splitmix64(s ^ (int(p) & _MASK))
    return s


def rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *path))
