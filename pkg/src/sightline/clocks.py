"""Clock sources for the timing harness.

The profiler brackets stages with an injectable nanosecond clock. Real
runs use the monotonic performance counter; mock-backed runs share a
VirtualClock that the mock advances by exactly its configured delay, which
makes simulated timing reports reproducible bit for bit.
"""

from __future__ import annotations

import time


def monotonic_ns() -> int:
    return time.perf_counter_ns()


class VirtualClock:
    """Logical nanosecond clock advanced explicitly by simulated work."""

    def __init__(self, start_ns: int = 0):
        self._now_ns = start_ns

    def now_ns(self) -> int:
        return self._now_ns

    def advance_ms(self, ms: float) -> None:
        self._now_ns += int(round(ms * 1e6))


def precise_sleep_ms(ms: float) -> None:
    """Sleep at least ms with sub-0.1 ms overshoot (sleep then spin)."""
    if ms <= 0:
        return
    deadline = time.perf_counter_ns() + int(ms * 1e6)
    coarse = (ms - 0.2) / 1e3
    if coarse > 0:
        time.sleep(coarse)
    while time.perf_counter_ns() < deadline:
        pass
