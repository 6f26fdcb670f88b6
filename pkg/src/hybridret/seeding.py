"""Named random sub-streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; stable across runs and platforms."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def subseed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**31 - 1))
