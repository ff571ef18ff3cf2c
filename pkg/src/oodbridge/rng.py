"""Counter-based, splittable random streams.

Every random draw in the package comes from a Philox generator keyed by a
``SeedSequence`` built from the user seed followed by a path of integer
keys, e.g. ``make_rng(seed, sample_index)``. Distinct paths give
independent streams, so work can be split across processes and scheduled
in any order without changing the result.

The key paths are part of the archive contract:

* per-sample corruption in a dataset: ``derive_seed(seed, sample_index)``
* per-spec calibration seed: ``derive_seed(seed, spec_index)``
* training streams: ``(seed, STREAM_*, ...)`` as documented in ``training``
"""

import numpy as np

SEED_MAX = 2**64 - 1

# Stream tags for training; values are arbitrary but frozen.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_ALGORITHM = 4
STREAM_OUTLIER = 5


def _check(seed):
    seed = int(seed)
    if seed < 0 or seed > SEED_MAX:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def _words(value):
    return [value & 0xFFFFFFFF, value >> 32]


def seed_sequence(seed, *keys):
    # SeedSequence drops trailing zero words and splits big ints into a
    # variable number of words, so (s, 1) and (s, 1, 0) would collide.
    # Fixed-width words plus the key count make the path encoding injective.
    entropy = _words(_check(seed))
    for k in keys:
        entropy += _words(_check(k))
    entropy.append(len(keys))
    return np.random.SeedSequence(entropy)


def make_rng(seed, *keys):
    """Generator for the stream addressed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys):
    """A fresh 64-bit seed for the child stream ``(seed, *keys)``."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
