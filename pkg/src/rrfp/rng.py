"""Deterministic, order-independent random sub-streams.

Every random draw in this package comes from a named sub-stream derived
from a root seed.  Derivation hashes the label path, so the stream a
consumer gets does not depend on how many other streams were opened
before it: adding instrumentation or reordering setup code never
perturbs sampled values.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def _digest(root_seed: int, labels: tuple) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return h.digest()


def substream(root_seed: int, *labels) -> np.random.Generator:
    """Return the PCG64 generator for the sub-stream named by ``labels``.

    The same (root_seed, labels) always yields an identical stream, on
    any platform.  Labels may be ints, strings, or anything with a
    stable str().
    """
    state = int.from_bytes(_digest(root_seed, labels), "big")
    return np.random.Generator(np.random.PCG64(state))
