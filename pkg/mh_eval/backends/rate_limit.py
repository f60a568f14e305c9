from __future__ import annotations

import threading
import time
from typing import Callable


class RateLimiter:
    """
    Spaces requests at least 1/rate seconds apart across all threads.
    Over any window of W seconds at most ceil(rate * W) + 1 requests start.
    """

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate <= 0:
            raise ValueError("rate must be > 0")
        self._interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next_slot = float("-inf")

    def acquire(self) -> float:
        """Blocks until this caller's slot; returns the slot time."""
        with self._lock:
            now = self._clock()
            slot = max(now, self._next_slot)
            self._next_slot = slot + self._interval
        wait = slot - self._clock()
        if wait > 0:
            self._sleep(wait)
        return slot
