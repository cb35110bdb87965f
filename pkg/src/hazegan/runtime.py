"""Thread-count control for the BLAS backend.

``HAZEGAN_NUM_THREADS`` caps BLAS threads; ``HAZEGAN_DETERMINISTIC=1`` forces a
single thread so reductions always run in the same order.
"""

from __future__ import annotations

import contextlib
import os
from typing import Iterator

from threadpoolctl import threadpool_limits

ENV_THREADS = "HAZEGAN_NUM_THREADS"
ENV_DETERMINISTIC = "HAZEGAN_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(ENV_DETERMINISTIC, "").strip().lower() in ("1", "true", "yes", "on")


def env_thread_count() -> int | None:
    if deterministic_requested():
        return 1
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{ENV_THREADS} must be a positive integer")
    return n


@contextlib.contextmanager
def thread_limit(n: int | None) -> Iterator[None]:
    if n is None:
        yield
        return
    with threadpool_limits(limits=n, user_api="blas"):
        yield
