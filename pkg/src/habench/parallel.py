"""Column-chunked thread parallelism with results independent of the worker count.

Work is split into fixed-width column blocks whose boundaries do not depend on
the number of threads, and results are reassembled in block order, so the
thread count only changes wall time.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

BLOCK = 4096
ENV_THREADS = "HABENCH_THREADS"

T = TypeVar("T")


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        raw = os.environ.get(ENV_THREADS, "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


def column_blocks(n_columns: int, block: int = BLOCK) -> list[slice]:
    return [slice(s, min(s + block, n_columns)) for s in range(0, n_columns, block)]


def map_blocks(fn: Callable[[slice], T], n_columns: int, threads: int | None = None) -> list[T]:
    blocks = column_blocks(n_columns)
    threads = resolve_threads(threads)
    if threads == 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))
