"""Seed derivation shared by every random stream in dsmrf.

Each stream is a pure function of the global seed and the position of the
work item in its grid (never of the worker that runs it):

    derive_seed(seed, index) = splitmix64(splitmix64(seed) ^ index)

All arithmetic is modulo 2**64.
"""
import numpy as np

from dsmrf.errors import InvalidArgumentError

MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One output of the splitmix64 generator whose state is `x`."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _as_u64(value):
    if isinstance(value, str):
        # stable across processes, unlike hash()
        acc = 0
        for byte in value.encode('utf-8'):
            acc = splitmix64(acc ^ byte)
        return acc
    value = int(value)
    if value < 0 or value > MASK64:
        raise InvalidArgumentError(f'seed component {value} is outside [0, 2**64)')
    return value


def derive_seed(seed, index):
    return splitmix64(splitmix64(_as_u64(seed)) ^ _as_u64(index))


def rng_for(seed, *path):
    """numpy Generator for the work item at `path` (ints or short string tags)."""
    value = _as_u64(seed)
    for index in path:
        value = derive_seed(value, index)
    return np.random.default_rng(value)
