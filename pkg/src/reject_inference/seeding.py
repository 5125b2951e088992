"""Counter-based seed derivation.

Every random stream is addressed by a tuple of keys below a master seed:
``derive_rng(seed, "train", 3)`` always yields the same generator, whatever
else was drawn before. String keys are mapped through CRC-32 so that adding
a method or a rate never shifts the streams of the others.
"""

from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean seed keys are ambiguous")
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    if isinstance(key, float):
        # rates: stable to 1e-9
        return int(round(key * 1e9))
    raise TypeError(f"unsupported seed key {key!r}")


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=check_seed(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """A 64-bit child seed, for APIs that take an integer rather than a generator."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])
