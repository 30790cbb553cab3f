"""Optional process pool for independent solves.

``SRLAB_WORKERS`` sets the pool size; unset or 1 runs serially in-process,
which keeps results identical and avoids pickling closures.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_WORKERS = "SRLAB_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(ENV_WORKERS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_WORKERS} must be >= 1")
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Order-preserving map; parallel only when more than one worker is configured.

    Pool mode needs picklable ``fn`` and items.
    """
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
