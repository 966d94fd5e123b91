"""
Worker pool for independent patch and element computations
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Worker cap from VERIFEM_THREADS (default 1)"""
    raw = os.getenv("VERIFEM_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer VERIFEM_THREADS={raw!r}")
        return 1
    return max(count, 1)


def parallel_map(function: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Apply function to every item; results keep the input order"""
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))
