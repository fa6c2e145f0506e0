"""Counter-based random streams pinned for reproducibility.

Every (master_seed, trial, t) triple names an independent stream. The
k-th uniform of a stream with seed ``z`` is
``((mix64(z + (k+1) * GOLDEN) >> 11) + 0.5) * 2**-53``, strictly inside
(0, 1). ``mix64`` is the SplitMix64 output finalizer. Stream seeds are
``mix64(master ^ mix64((trial << 32) | t))``.
"""

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
M1 = 0xBF58476D1CE4E5B9
M2 = 0x94D049BB133111EB


def mix64(z):
    z &= MASK
    z = ((z ^ (z >> 30)) * M1) & MASK
    z = ((z ^ (z >> 27)) * M2) & MASK
    return z ^ (z >> 31)


def mix64_array(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(M2)
    return z ^ (z >> np.uint64(31))


def stream_seed(master, trial, t):
    if not (0 <= trial < 1 << 32 and 0 <= t < 1 << 32):
        raise ValueError("trial and t must fit in 32 bits")
    return mix64((master & MASK) ^ mix64((trial << 32) | t))


def uniform(seed, k):
    return ((mix64(seed + (k + 1) * GOLDEN) >> 11) + 0.5) * 2.0 ** -53


class SeedSchedule:
    """Deterministic per-(trial, t) seed derivation shared across policies."""

    def __init__(self, master_seed):
        self.master_seed = int(master_seed) & MASK

    def derive(self, trial, t):
        return stream_seed(self.master_seed, int(trial), int(t))

    def derive_many(self, trials, t):
        trials = np.asarray(trials, dtype=np.uint64)
        key = (trials << np.uint64(32)) | np.uint64(t)
        return mix64_array(np.uint64(self.master_seed) ^ mix64_array(key))

    def uniforms(self, trials, t, count):
        """Array (len(trials), count) of the first ``count`` uniforms of each stream."""
        seeds = self.derive_many(trials, t)
        ks = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = seeds[:, None] + ks[None, :] * np.uint64(GOLDEN)
        bits = mix64_array(z) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * 2.0 ** -53
