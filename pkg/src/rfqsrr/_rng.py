"""Seed derivation.

Every randomized step draws from a stream keyed by the master seed plus a
tuple of integers naming the step, so results never depend on execution order
or thread count.
"""

import numpy as np

# stream tags
SPLIT = 1
TREE = 2
IMPORTANCE = 3
SHADOW = 4
BORUTA = 5
CONSENSUS = 6
REPETITION = 7
SYNTHETIC = 8


def check_seed(seed):
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    return seed


def derive_seed(seed, *keys):
    """Return a 63-bit integer seed for the stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def generator(seed, *keys):
    """Return a numpy Generator for the stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)
