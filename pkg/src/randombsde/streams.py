"""Reproducible random streams.

Every draw in the package comes from a Philox generator keyed by
``(seed, purpose, *counters)``.  Path populations are generated in fixed-size
blocks, each with its own key, so results depend neither on the number of
worker threads nor on the order in which blocks are produced.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from typing import Callable, Iterator, TypeVar

import numpy as np

BLOCK = 4096

T = TypeVar("T")


class Purpose(IntEnum):
    BROWNIAN = 1
    JUMPS = 2
    BRIDGE = 3
    FRESH = 4
    CHECK = 5
    VALIDATE = 6
    PERTURB = 7
    KERNEL = 8
    NOISE_MEASURE = 9


def generator(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for ``seed`` and the integer key path ``key``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def blocks(n: int, size: int = BLOCK) -> Iterator[tuple[int, int, int]]:
    """Yield ``(index, start, stop)`` for consecutive blocks covering ``range(n)``."""
    for b, start in enumerate(range(0, n, size)):
        yield b, start, min(start + size, n)


def map_blocks(fn: Callable[[int, int, int], T], n: int, workers: int = 1,
               size: int = BLOCK) -> list[T]:
    """Apply ``fn(index, start, stop)`` to every block; output in block order."""
    spans = list(blocks(n, size))
    if workers <= 1 or len(spans) == 1:
        return [fn(*s) for s in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fn(*s), spans))
