"""Order-preserving process-pool map with single-threaded BLAS in every worker.

BLAS is pinned to one thread both in workers and in the serial path, so the
floating-point reduction order (and therefore every result) does not depend
on the number of worker processes.
"""

import os
import pickle
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits


def resolve_threads(threads=None) -> int:
    if threads is None:
        env = os.environ.get("MVTP_THREADS")
        if env:
            threads = int(env)
        else:
            threads = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
            threads = threads or 1
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be at least 1")
    return threads


def _init_worker():
    threadpool_limits(1)


def _picklable(obj) -> bool:
    try:
        pickle.dumps(obj)
    except Exception:
        return False
    return True


def parallel_map(func, items, threads=1):
    """``[func(x) for x in items]``, optionally spread over ``threads`` processes."""
    items = list(items)
    threads = max(1, int(threads or 1))
    if threads == 1 or len(items) < 2 or not _picklable((func, items[:1])):
        with threadpool_limits(1):
            return [func(x) for x in items]
    chunk = max(1, len(items) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker) as ex:
        return list(ex.map(func, items, chunksize=chunk))
