"""Bounded worker pool.

RUN_THREADS is the only environment variable loopmdm reads. Work is split
into shards whose seeds do not depend on the pool size, so results are the
same for any thread count.
"""
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
import logging
import os
from typing import Callable, List, Sequence, TypeVar

import numpy as np

ENV_THREADS = "RUN_THREADS"

A = TypeVar("A")
R = TypeVar("R")


def run_threads() -> int:
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        logging.warning("workers: ignoring %s=%r (not an integer)", ENV_THREADS, raw)
        return 1
    if value < 1:
        logging.warning("workers: ignoring %s=%d (must be >= 1)", ENV_THREADS, value)
        return 1
    return value


def parallel_map(fn: Callable[[A], R], items: Sequence[A]) -> List[R]:
    """Ordered map over a thread pool of RUN_THREADS workers."""
    threads = min(run_threads(), len(items))
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def shard_rngs(rng: np.random.Generator, n_shards: int) -> List[np.random.Generator]:
    """Independent child generators drawn from one parent stream."""
    seed = int(rng.integers(0, 2 ** 63 - 1))
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_shards)]


def shard_sizes(total: int, shard_size: int) -> List[int]:
    full, rest = divmod(total, shard_size)
    return [shard_size] * full + ([rest] if rest else [])
