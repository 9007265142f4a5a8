"""Unit tests for common.py: worker sizing, ordered fan-out, seed keys and timing."""

import logging
import os
import threading
import time

import pytest

from fpi_locate.common import (
    THREADS_ENV,
    Stopwatch,
    parallel_map,
    stable_key,
    timed,
    worker_count,
)


# ---------------------------------------------------------------------------
# worker_count
# ---------------------------------------------------------------------------

class TestWorkerCount:
    def test_default(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert worker_count() == min(4, os.cpu_count() or 1)

    def test_env_value(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "7")
        assert worker_count() == 7

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_invalid_falls_back_to_one(self, monkeypatch, caplog, raw):
        monkeypatch.setenv(THREADS_ENV, raw)
        with caplog.at_level(logging.WARNING, logger="fpi_locate.common"):
            assert worker_count() == 1
        assert THREADS_ENV in caplog.text

    def test_blank_is_default(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "  ")
        assert worker_count() == min(4, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# parallel_map
# ---------------------------------------------------------------------------

class TestParallelMap:
    def test_preserves_order(self):
        def slow_square(x):
            time.sleep(0.001 * (10 - x))
            return x * x
        assert parallel_map(slow_square, range(10), workers=4) == [x * x for x in range(10)]

    def test_single_worker_runs_inline(self):
        names = parallel_map(lambda _: threading.current_thread().name, range(3), workers=1)
        assert set(names) == {threading.current_thread().name}

    def test_empty(self):
        assert parallel_map(lambda x: x, [], workers=4) == []

    def test_exception_propagates(self):
        def boom(x):
            if x == 2:
                raise ValueError("bad item")
            return x
        with pytest.raises(ValueError, match="bad item"):
            parallel_map(boom, range(4), workers=2)


# ---------------------------------------------------------------------------
# Keys and timing
# ---------------------------------------------------------------------------

class TestStableKey:
    def test_fixed_values(self):
        assert stable_key("train") == stable_key("train")
        assert stable_key("train") != stable_key("test")
        assert 0 <= stable_key("pair_00000") < 2**32


class TestTiming:
    def test_stopwatch(self):
        watch = Stopwatch()
        assert watch.mean_ms == 0.0
        for _ in range(2):
            with watch.time():
                time.sleep(0.002)
        assert watch.count == 2
        assert watch.total_ms >= 4.0
        assert watch.mean_ms == pytest.approx(watch.total_ms / 2)

    def test_stopwatch_counts_failures(self):
        watch = Stopwatch()
        with pytest.raises(RuntimeError):
            with watch.time():
                raise RuntimeError
        assert watch.count == 1

    def test_timed(self):
        result, ms = timed(lambda: 42)
        assert result == 42
        assert ms >= 0.0
