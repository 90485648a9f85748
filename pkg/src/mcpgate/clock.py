"""Injectable time sources. All timestamps are epoch seconds (float)."""

from __future__ import annotations

import time


class SystemClock:
    def now(self) -> float:
        return time.time()


class VirtualClock:
    """Deterministic clock for tests and harness runs. Only moves forward."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("virtual clock cannot move backwards")
        self._now += seconds
        return self._now
