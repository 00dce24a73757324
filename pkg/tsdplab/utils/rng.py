"""
Seeded randomness for tsdplab.

Every random draw in the package comes from a NumPy Generator derived from a
single integer seed plus a tuple of string/int keys naming the component
("train", "plan", cell key, ...). Streams for different keys are independent
and each stream is reproducible on every platform.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- derive_seed(seed, *keys): 128-bit integer derived from seed and keys
- make_rng(seed, *keys): NumPy Generator for the derived stream
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[str, int, float]


def derive_seed(seed: int, *keys: Key) -> int:
    """Hash (seed, keys) with SHA-256 and return the first 128 bits."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(digest[:16], "little")


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Return a PCG64 generator for the stream named by (seed, keys)."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, *keys)))
