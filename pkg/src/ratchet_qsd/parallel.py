"""Worker-pool configuration.

Kernels release the GIL, so a thread pool gives real parallelism.  Work is
always partitioned into fixed chunks whose results do not depend on which
worker runs them.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "RATCHET_QSD_THREADS"
_threads: int | None = None


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get(ENV_VAR)
    if env:
        return max(1, int(env))
    return 1


def map_chunks(fn, chunks, threads: int | None = None):
    """Apply ``fn`` to every chunk; results come back in chunk order."""
    n = threads or get_threads()
    chunks = list(chunks)
    if n == 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, chunks))
