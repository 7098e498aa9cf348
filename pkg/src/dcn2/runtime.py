"""Process-wide kernel execution settings (thread count, deterministic mode)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_num_threads = None
_deterministic = True


def num_threads() -> int:
    global _num_threads
    if _num_threads is None:
        env = os.environ.get("DCN2_THREADS", "")
        _num_threads = max(1, int(env)) if env.isdigit() and int(env) > 0 else 1
    return _num_threads


def set_num_threads(n: int) -> None:
    global _num_threads
    _num_threads = max(1, int(n))


def deterministic() -> bool:
    return _deterministic


def set_deterministic(flag: bool) -> None:
    global _deterministic
    _deterministic = bool(flag)


def run_chunks(fn, chunks, threads: int | None = None, ordered: bool = True):
    """Apply fn over chunks, serially or on a thread pool.

    With ordered=True results come back in chunk order regardless of thread
    scheduling; ordered=False yields them in completion order (documented
    nondeterministic-reduction mode).
    """
    threads = num_threads() if threads is None else max(1, threads)
    if threads == 1 or len(chunks) <= 1:
        for ch in chunks:
            yield fn(ch)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        if ordered:
            yield from pool.map(fn, chunks)
        else:
            from concurrent.futures import as_completed

            futures = [pool.submit(fn, ch) for ch in chunks]
            for fut in as_completed(futures):
                yield fut.result()
