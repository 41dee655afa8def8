from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_pool: Optional[ThreadPoolExecutor] = None
_pool_size: int = 0


def get_worker_pool(workers: int = 4) -> ThreadPoolExecutor:
    """Get or create the shared bounded worker pool"""
    global _pool, _pool_size
    if _pool is None or _pool_size != workers:
        if _pool is not None:
            _pool.shutdown(wait=True)
        _pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fleetwatch")
        _pool_size = workers
        logger.info(f"Created worker pool with {workers} workers")
    return _pool


def shutdown_worker_pool():
    """Shut down the shared worker pool"""
    global _pool, _pool_size
    if _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
        _pool_size = 0
        logger.info("Closed worker pool")


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int = 4) -> List[R]:
    """Run fn over items on the pool, results in submission order"""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    pool = get_worker_pool(workers)
    futures = [pool.submit(fn, item) for item in items]
    return [f.result() for f in futures]
