"""
Ordered parallel map over a bounded thread pool.

numpy releases the GIL inside its array kernels, so threads are enough to
spread robustness evaluation over several cores.
"""
import os
from concurrent.futures import ThreadPoolExecutor

from tqdm import tqdm


def resolve_threads(threads=None):
    """
    Resolve the worker count from the argument, then STLMINE_THREADS, then the CPU count.

    Args:
        threads: Explicit worker cap (optional)

    Returns:
        A positive worker count
    """
    if threads:
        return max(1, int(threads))
    env_threads = os.environ.get("STLMINE_THREADS")
    if env_threads and env_threads.isdigit() and int(env_threads) > 0:
        return int(env_threads)
    return max(1, min(8, os.cpu_count() or 1))


def parallel_map(fn, items, threads=None, desc=None, show_progress=False):
    """
    Apply fn to every item and return the results in input order.

    Args:
        fn: Callable applied to each item
        items: Sequence of inputs
        threads: Worker cap (None resolves through resolve_threads)
        desc: Progress bar label
        show_progress: Whether to draw a tqdm bar

    Returns:
        List of results, same order as items
    """
    items = list(items)
    workers = resolve_threads(threads)
    if workers == 1 or len(items) < 2:
        iterator = tqdm(items, desc=desc, disable=not show_progress)
        return [fn(item) for item in iterator]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        iterator = pool.map(fn, items)
        return list(tqdm(iterator, total=len(items), desc=desc, disable=not show_progress))
