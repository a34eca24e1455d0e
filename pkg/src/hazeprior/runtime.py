"""Process-wide runtime knobs."""

from __future__ import annotations

import os

from .errors import ConfigError

THREADS_ENV = "UDP_THREADS"


def thread_count() -> int:
    """Worker cap for the embarrassingly-parallel paths.

    Reads the UDP_THREADS environment variable; defaults to the hardware
    count.  Values below 1 or non-integers are rejected.
    """
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
