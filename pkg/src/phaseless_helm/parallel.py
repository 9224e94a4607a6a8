"""Worker-count plumbing for the per-direction stages.

Stages that are independent across incident directions go through
`map_parallel`; results keep the input order, so runs are deterministic for
any thread count. The count comes from, in priority order: the explicit
argument, the PHASELESS_HELM_THREADS environment variable, the available
parallelism.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional

ENV_VAR = "PHASELESS_HELM_THREADS"


def resolve_threads(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def map_parallel(fn: Callable, items: Iterable, threads: Optional[int] = None) -> list:
    """Ordered map over items, on a thread pool when threads > 1."""
    items = list(items)
    n = resolve_threads(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
