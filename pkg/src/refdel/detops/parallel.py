"""Worker pool used by the operators.

Only order-insensitive dimensions (rows, output elements) are handed out to
workers; every worker runs the same serial inner loop, so results do not
depend on the worker count.
"""

from __future__ import annotations

import contextlib
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator

_state = threading.local()
_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def get_workers() -> int:
    return getattr(_state, "workers", 1)


def set_workers(n: int) -> None:
    if n < 1:
        raise ValueError("worker count must be >= 1")
    _state.workers = int(n)


@contextlib.contextmanager
def workers(n: int) -> Iterator[None]:
    prev = get_workers()
    set_workers(n)
    try:
        yield
    finally:
        set_workers(prev)


def _pool(n: int) -> ThreadPoolExecutor:
    with _pools_lock:
        if n not in _pools:
            _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="detops")
        return _pools[n]


def row_blocks(rows: int, n: int) -> list[tuple[int, int]]:
    n = max(1, min(n, rows))
    base, extra = divmod(rows, n)
    out, lo = [], 0
    for i in range(n):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def run_rows(fn: Callable[[int, int], None], rows: int) -> None:
    """Call ``fn(lo, hi)`` over a partition of ``range(rows)``."""
    w = get_workers()
    if w <= 1 or rows <= 1:
        fn(0, rows)
        return
    blocks = row_blocks(rows, w)
    for fut in [_pool(w).submit(fn, lo, hi) for lo, hi in blocks]:
        fut.result()
