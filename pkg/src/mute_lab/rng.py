"""Seeded random-number streams.

One master seed fans out into independent named streams so that toggling
one consumer (say, dropout) never shifts the draws seen by another (say,
the bias noise).  Streams that depend on the training step are derived
from ``(master, name, step)``, which makes a resumed run consume exactly
the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator for the named stream.

    The same ``(master_seed, name, indices)`` triple always yields the
    same generator state, independent of call order.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence([int(master_seed), tag, *map(int, indices)])
    return np.random.Generator(np.random.PCG64(seq))
