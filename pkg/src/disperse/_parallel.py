"""Worker pool sized by the DISPERSE_THREADS environment variable.

Work items carry their own seeds and results are gathered in submission
order, so the worker count changes speed only.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count():
    raw = os.environ.get("DISPERSE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def map_chunks(fn, items):
    """``[fn(*item) for item in items]``, possibly on several threads."""
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(*item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda item: fn(*item), items))
