"""Deterministic block-parallel execution over Monte Carlo paths.

Paths are split into fixed-size blocks.  Block ``b`` always draws from the
generator seeded by ``(seed, b)``, and results are gathered in block order,
so outputs do not depend on the number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

DEFAULT_BLOCK = 1000

R = TypeVar("R")


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(block)])


def block_sizes(n_items: int, block_size: int = DEFAULT_BLOCK) -> List[int]:
    if n_items <= 0:
        return []
    full, rest = divmod(int(n_items), int(block_size))
    return [block_size] * full + ([rest] if rest else [])


def map_blocks(
    fn: Callable[[int, int], R], n_items: int, block_size: int = DEFAULT_BLOCK, workers: int = 1
) -> List[R]:
    """Call ``fn(block_index, block_len)`` for every block; results in block order."""
    sizes = block_sizes(n_items, block_size)
    if workers <= 1 or len(sizes) <= 1:
        return [fn(b, n) for b, n in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, b, n) for b, n in enumerate(sizes)]
        return [f.result() for f in futures]
