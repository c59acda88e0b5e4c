"""Named, splittable random streams.

Every consumer derives its own stream from ``(master seed, purpose tag,
*indices)``, so results never depend on the order in which consumers run.
"""
from __future__ import annotations

import functools
import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@functools.lru_cache(maxsize=4096)
def _key(seed: int, tag: str) -> tuple[int, int]:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag_id(tag)])
    k0, k1 = ss.generate_state(2, np.uint64)
    return int(k0), int(k1)


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *indices)``.

    Up to two integer indices are placed in the high words of a Philox
    counter; the key comes from the seed and tag.
    """
    if len(indices) > 2:
        raise ValueError("at most two stream indices are supported")
    idx = [int(i) for i in indices] + [0] * (2 - len(indices))
    bitgen = np.random.Philox(key=list(_key(seed, tag)), counter=[0, 0, idx[1], idx[0] + (len(indices) << 60)])
    return np.random.Generator(bitgen)


def subseed(seed: int, tag: str, *indices: int) -> int:
    """A 63-bit integer seed derived from ``(seed, tag, *indices)``."""
    return int(stream(seed, tag, *indices).integers(0, 2**63 - 1))
