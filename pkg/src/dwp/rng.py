"""Named, splittable random streams.

Streams are Philox generators keyed by a seed plus any number of labels,
so the same ``(seed, labels)`` always yields the same sequence no matter
which other streams were drawn from before.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    if isinstance(label, float):
        label = repr(label)
    return zlib.crc32(str(label).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(l) for l in labels)])
    return np.random.Generator(np.random.Philox(ss))
