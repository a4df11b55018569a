"""Worker-count resolution and order-preserving parallel maps.

Every parallel stage splits work into chunks whose boundaries do not depend
on the worker count, so results are bit-identical for any number of threads.
"""
from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from .errors import InvalidArgumentError

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "MFBDSDE_THREADS"
_default_threads: int | None = None


def set_default_threads(threads: int | None) -> None:
    """Set the process-wide worker count used when none is passed explicitly."""
    global _default_threads
    if threads is not None and threads < 1:
        raise InvalidArgumentError(f"threads must be >= 1, got {threads}")
    _default_threads = threads


def resolve_threads(threads: int | None = None) -> int:
    """Return the worker count: explicit value, then default, then env var, then 1."""
    if threads is None:
        threads = _default_threads
    if threads is None:
        raw = os.environ.get(ENV_VAR, "").strip()
        threads = int(raw) if raw else 1
    if threads < 1:
        raise InvalidArgumentError(f"threads must be >= 1, got {threads}")
    return threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Apply ``fn`` to every item and return results in input order."""
    items = list(items)
    workers = min(resolve_threads(threads), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_bounds(total: int, chunk: int) -> Sequence[tuple[int, int]]:
    """Fixed-size ``[start, stop)`` chunks covering ``range(total)``."""
    return [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
