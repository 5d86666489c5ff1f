"""Seed splitting: one master seed, many independent named streams.

Stream ``(name, index)`` of master seed ``m`` is seeded with
``SeedSequence([m, crc32(name), index])``. Streams with different names or
indices are statistically independent and never depend on the order in
which they are created.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(master: int, name: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode()), int(index)])


def stream(master: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name, index))


def int_seed(master: int, name: str, index: int = 0) -> int:
    """A 31-bit integer seed for APIs that take plain ints (e.g. ``env.reset``)."""
    return int(stream_seed(master, name, index).generate_state(1)[0] & 0x7FFFFFFF)
