"""Tests for environment overrides, seeded streams and the worker pool."""

from __future__ import annotations

import os
import threading
from pathlib import Path

import numpy as np
import pytest

from pdum.kags import utils
from pdum.kags.errors import ConfigError


def test_env_setting_reads_prefixed_variable(monkeypatch) -> None:
    """Settings map to KAGS_<NAME> with separators normalized."""
    monkeypatch.setenv("KAGS_FEATURE_CACHE", "  /tmp/cache ")
    assert utils.env_setting("feature-cache") == "/tmp/cache"
    monkeypatch.setenv("KAGS_FEATURE_CACHE", "   ")
    assert utils.env_setting("feature-cache") is None
    with pytest.raises(ValueError):
        utils.env_setting(" ")


def test_worker_count_defaults_and_overrides(monkeypatch) -> None:
    """KAGS_THREADS caps the pool; zero means the CPU count."""
    monkeypatch.delenv("KAGS_THREADS", raising=False)
    assert utils.worker_count() == (os.cpu_count() or 1)
    monkeypatch.setenv("KAGS_THREADS", "3")
    assert utils.worker_count() == 3
    monkeypatch.setenv("KAGS_THREADS", "0")
    assert utils.worker_count() == (os.cpu_count() or 1)


@pytest.mark.parametrize("value", ["many", "-2"])
def test_worker_count_rejects_bad_values(monkeypatch, value: str) -> None:
    """Non-integers and negative counts are configuration errors."""
    monkeypatch.setenv("KAGS_THREADS", value)
    with pytest.raises(ConfigError, match="KAGS_THREADS"):
        utils.worker_count()


def test_rng_streams_are_reproducible_and_independent() -> None:
    """Named streams repeat for the same seed and differ between names."""
    a = utils.rng_stream(0, "init").standard_normal(4)
    assert np.array_equal(a, utils.rng_stream(0, "init").standard_normal(4))
    assert not np.array_equal(a, utils.rng_stream(0, "shuffle/1").standard_normal(4))
    assert not np.array_equal(a, utils.rng_stream(1, "init").standard_normal(4))


def test_parallel_map_keeps_order_and_uses_threads(monkeypatch) -> None:
    """Results follow input order whatever thread produced them."""
    monkeypatch.setenv("KAGS_THREADS", "4")
    seen: set[int] = set()

    def work(x: int) -> int:
        seen.add(threading.get_ident())
        return x * x

    assert utils.parallel_map(work, range(20)) == [x * x for x in range(20)]
    assert seen


def test_parallel_map_runs_inline_with_one_worker(monkeypatch) -> None:
    """A single worker maps on the calling thread."""
    monkeypatch.setenv("KAGS_THREADS", "1")
    caller = threading.get_ident()
    assert utils.parallel_map(lambda _: threading.get_ident(), [1, 2]) == [caller, caller]
    assert utils.parallel_map(lambda x: x, []) == []


def test_tail_file_returns_recent_lines(tmp_path: Path) -> None:
    """Only the requested trailing lines are returned."""
    log = tmp_path / "train.log.jsonl"
    log.write_text("".join(f"line {i}\n" for i in range(10)), encoding="utf-8")
    assert utils.tail_file(log, lines=2) == "line 8\nline 9"
    assert utils.tail_file(tmp_path / "missing.log") == ""
