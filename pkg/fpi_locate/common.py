"""Shared utilities: worker pool sizing, per-sample seeds, timing."""

import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, TypeVar

logger = logging.getLogger("fpi_locate.common")

THREADS_ENV = "FPI_THREADS"
DEFAULT_MAX_WORKERS = 4

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads, capped by ``FPI_THREADS``.

    Defaults to ``min(4, cpu_count)``.  A value that is not a positive
    integer falls back to 1 with a warning.
    """
    default = min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1)
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        logger.warning("%s=%r is not a positive integer; using 1 worker", THREADS_ENV, raw)
        return 1
    return value


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Apply *fn* to every item, preserving input order in the result."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

# Stream identifiers for RngState.generator(); one per consumer.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2
STREAM_SYNTH = 3
STREAM_TEST_SCALES = 4
STREAM_BENCH = 5


def stable_key(text: str) -> int:
    """Platform-independent integer key for a string (pair ids, split names)."""
    return zlib.crc32(text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

class Stopwatch:
    """Accumulates wall time in milliseconds across ``with`` blocks."""

    def __init__(self):
        self.total_ms = 0.0
        self.count = 0

    @contextmanager
    def time(self) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.total_ms += (time.perf_counter() - start) * 1000.0
            self.count += 1

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.count if self.count else 0.0


def timed(fn: Callable[[], R]) -> tuple[R, float]:
    """Run *fn* and return its result with the elapsed milliseconds."""
    start = time.perf_counter()
    result = fn()
    return result, (time.perf_counter() - start) * 1000.0
