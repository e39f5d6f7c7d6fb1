"""Instrumented multiply-accumulate counters filled by the executors."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field


@dataclass
class MacCounter:
    """Integer MAC tallies by category (1 MAC = one multiply plus one add)."""

    macs: Counter = field(default_factory=Counter)
    active_fraction: float | None = None

    def add(self, category: str, n: int) -> None:
        self.macs[category] += int(n)

    def __getitem__(self, category: str) -> int:
        return self.macs[category]

    @property
    def total(self) -> int:
        return sum(self.macs.values())
