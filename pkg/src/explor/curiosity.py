"""Transition visit counts and the inverse-square-root novelty reward."""

from __future__ import annotations

import math
from typing import Iterator, NamedTuple


class Transition(NamedTuple):
    prev: str
    action: str
    next: str


class VisitCounts:
    """Counter table over transitions; absent entries mean count 1.

    Counts never decrease and only move to storage once observed, so the
    table stays sparse over the (huge) transition space.
    """

    def __init__(self):
        self._counts: dict[Transition, int] = {}

    def count(self, t: Transition) -> int:
        return self._counts.get(t, 1)

    def observe(self, t: Transition) -> float:
        """Reward 1/sqrt(N) from the pre-increment count, then increment."""
        n = self._counts.get(t, 1)
        self._counts[t] = n + 1
        return 1.0 / math.sqrt(n)

    def peek(self, t: Transition) -> float:
        """Reward the next observe would return, without changing counts."""
        return 1.0 / math.sqrt(self._counts.get(t, 1))

    def __len__(self) -> int:
        return len(self._counts)

    def items(self) -> Iterator[tuple[Transition, int]]:
        return iter(self._counts.items())

    def snapshot(self) -> list[dict]:
        return [
            {"prev": t.prev, "action": t.action, "next": t.next, "count": n}
            for t, n in sorted(self._counts.items())
        ]
