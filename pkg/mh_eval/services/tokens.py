from __future__ import annotations

import math
import re
from typing import Callable

TokenCounter = Callable[[str], int]

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_", re.UNICODE)


class HeuristicTokenCounter:
    """
    Backend-agnostic token estimate: word runs plus standalone punctuation marks,
    scaled by `safety_factor` and rounded up.
    """

    def __init__(self, safety_factor: float = 1.0) -> None:
        if safety_factor <= 0:
            raise ValueError("safety_factor must be > 0")
        self.safety_factor = safety_factor

    def __call__(self, text: str) -> int:
        raw = len(_TOKEN_RE.findall(text or ""))
        if self.safety_factor == 1.0:
            return raw
        return math.ceil(round(raw * self.safety_factor, 6))


STATS_COUNTER = HeuristicTokenCounter()
BUDGET_COUNTER = HeuristicTokenCounter(safety_factor=1.3)
