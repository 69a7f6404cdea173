"""Bounded parallel maps honouring the global thread cap."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor


def default_threads() -> int:
    env = os.environ.get("WBARY_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def resolve_threads(threads: int | None) -> int:
    return default_threads() if threads is None else max(1, int(threads))


def parallel_map(fn, items, threads: int | None = 1) -> list:
    """Ordered map over ``items`` using at most ``threads`` worker threads."""
    items = list(items)
    n = min(resolve_threads(threads), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def process_map(fn, items, workers: int | None = 1) -> list:
    """Ordered map in worker processes; ``fn`` and items must be picklable."""
    items = list(items)
    n = min(resolve_threads(workers), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
