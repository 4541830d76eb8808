"""
Counter-keyed random streams.

Each stream is a Philox generator seeded from (master_seed, purpose, *counters),
so a draw depends only on what it is for and never on the order in which
workers happen to ask for it.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_word(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(master_seed: int, *keys: Key) -> np.random.Generator:
    """Independent generator for the given master seed and key path."""
    entropy = [_key_word(master_seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
