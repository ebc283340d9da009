"""Deterministic, splittable random streams.

Every random draw in the package flows from a single u64 seed. Independent
streams are derived by hashing the seed together with a string label and
optional integer indices into a Philox counter key, so the stream consumed
by one component never depends on how many draws another component made
(or on worker count).
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *path).

    The same (seed, path) always yields an identical stream; distinct paths
    yield independent Philox keys.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        if isinstance(part, int):
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
        else:
            h.update(b"s" + str(part).encode("utf-8"))
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
