"""Process-level helpers: environment overrides, seeded streams and worker pools."""

from __future__ import annotations

import logging
import os
import re
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, TypeVar

import numpy as np

from .errors import ConfigError

__all__ = [
    "env_setting",
    "worker_count",
    "rng_stream",
    "parallel_map",
    "tail_file",
]

_ENV_PREFIX = "KAGS_"

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

T = TypeVar("T")
R = TypeVar("R")


def env_setting(name: str) -> str | None:
    """
    Return the ``KAGS_<NAME>`` environment override, if set.

    ``<NAME>`` is the upper-cased setting name with non-alphanumerics replaced
    by underscores.

    Parameters
    ----------
    name : str
        Setting name, e.g. ``"threads"``.

    Returns
    -------
    str | None
        The stripped value, or ``None`` when unset or blank.

    Raises
    ------
    ValueError
        If ``name`` is empty.
    """

    if not name or name.strip() == "":
        raise ValueError("Setting name must be a non-empty string.")
    value = os.environ.get(_env_var_name(name.strip()), "").strip()
    return value or None


def _env_var_name(name: str) -> str:
    sanitized = re.sub(r"[^A-Z0-9]+", "_", name.upper())
    return f"{_ENV_PREFIX}{sanitized}"


def worker_count() -> int:
    """Number of worker threads: ``KAGS_THREADS`` when positive, else the CPU count.

    Raises
    ------
    ConfigError
        If ``KAGS_THREADS`` is not a non-negative integer.
    """

    raw = env_setting("threads")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{_env_var_name('threads')} must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ConfigError(f"{_env_var_name('threads')} must be non-negative, got {value}")
    return value or (os.cpu_count() or 1)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """A generator for the named stream of ``seed``; streams are independent of each other."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Apply ``fn`` to ``items`` on up to :func:`worker_count` threads, keeping input order."""

    work = list(items)
    workers = min(worker_count(), len(work))
    if workers <= 1:
        return [fn(item) for item in work]
    logger.debug("Mapping %d items over %d threads", len(work), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, work))


def tail_file(path: Path, lines: int = 10) -> str:
    """Return the last ``lines`` lines from ``path``."""

    if not path.exists():
        return ""

    recent: deque[str] = deque(maxlen=lines)
    with path.open("r", encoding="utf-8", errors="replace") as handle:
        for line in handle:
            recent.append(line.rstrip("\n"))
    return "\n".join(recent)
