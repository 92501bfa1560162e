"""Seed-stream plumbing and the deterministic worker pool.

Every stochastic unit of work derives its RNG from (master seed, purpose tag,
item indices), so execution order and worker count never change results.
Results from the pool are merged in submission order.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def _key(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def rng_for(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator keyed by (seed, purpose, indices); independent of call order."""
    entropy = [master_seed & 0xFFFFFFFFFFFFFFFF, _key(purpose)] + [int(i) for i in indices]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def pmap(fn, items, workers: int = 1):
    """Ordered map over items, optionally on a thread pool.

    The output list is always in input order, so worker count cannot change
    results for pure per-item work.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
