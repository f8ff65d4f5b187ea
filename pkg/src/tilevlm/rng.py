"""Seed splitting.

Every random draw in the engine comes from ``rng_for(seed, *path)``: the root
seed and a textual path (e.g. ``("init", "branch.small")``) are hashed with
CRC32 into a ``numpy.random.SeedSequence`` feeding a PCG64 generator. The same
(seed, path) pair yields the same stream on every platform, and distinct paths
yield independent streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def path_key(*path: object) -> int:
    return zlib.crc32("/".join(str(p) for p in path).encode("utf-8"))


def rng_for(seed: int, *path: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), path_key(*path)])))
