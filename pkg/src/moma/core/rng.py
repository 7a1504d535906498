"""Seeded, splittable random streams.

A stream is identified by the root seed plus any number of string or integer
keys, so independent components draw from non-overlapping Philox streams and
adding a new consumer never perturbs existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def stream(seed: int, *keys) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed), *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(seq))
