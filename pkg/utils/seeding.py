"""
Stream-derived seeds.

Each consumer of randomness derives its own generator from the master seed
and a purpose tag, so adding draws in one stream never shifts another.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """
    Derive a 63-bit seed from a master seed and any number of tags.

    Args:
        master: Master seed
        tags: Strings or integers naming the stream (e.g. "storms", a timestamp)

    Returns:
        int: Derived seed, stable across platforms and Python versions
    """
    text = "/".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
