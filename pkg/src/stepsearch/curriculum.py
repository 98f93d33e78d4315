"""Walking-condition vocabulary and staged data curricula."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

FOOTWEAR = ("BF", "ST", "P1", "P2")
SPEEDS = ("W1", "W2", "W3", "W4")


@dataclass(frozen=True, order=True)
class ConditionTag:
    footwear: str
    speed: str

    def __post_init__(self):
        if self.footwear not in FOOTWEAR:
            raise ValueError(f"unknown footwear {self.footwear!r}; expected one of {FOOTWEAR}")
        if self.speed not in SPEEDS:
            raise ValueError(f"unknown speed {self.speed!r}; expected one of {SPEEDS}")

    def __str__(self) -> str:
        return f"{self.footwear}/{self.speed}"

    @classmethod
    def parse(cls, text: str) -> "ConditionTag":
        footwear, _, speed = text.partition("/")
        return cls(footwear, speed)


ALL_CONDITIONS: tuple[ConditionTag, ...] = tuple(ConditionTag(f, s) for f in FOOTWEAR for s in SPEEDS)


@dataclass(frozen=True)
class Stage:
    start_epoch: int
    conditions: frozenset

    def __post_init__(self):
        object.__setattr__(self, "conditions", frozenset(self.conditions))


@dataclass(frozen=True)
class CurriculumSchedule:
    """Ordered stages; stage ``i`` trains on its condition set from ``start_epoch`` on."""

    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def from_pairs(cls, pairs: Iterable) -> "CurriculumSchedule":
        stages = []
        for start, conds in pairs:
            tags = [c if isinstance(c, ConditionTag) else ConditionTag.parse(c) for c in conds]
            stages.append(Stage(int(start), frozenset(tags)))
        return cls(tuple(stages))

    def to_pairs(self) -> list:
        return [[s.start_epoch, sorted(str(c) for c in s.conditions)] for s in self.stages]

    def violations(self, total_epochs: int) -> list[str]:
        out = []
        if not self.stages:
            return ["curriculum has no stages"]
        if self.stages[0].start_epoch != 1:
            out.append(f"first stage starts at epoch {self.stages[0].start_epoch}, expected 1")
        for i, st in enumerate(self.stages):
            if not st.conditions:
                out.append(f"stage {i}: empty condition set")
            if not all(isinstance(c, ConditionTag) for c in st.conditions):
                out.append(f"stage {i}: non-condition member")
            if i:
                prev = self.stages[i - 1]
                if st.start_epoch <= prev.start_epoch:
                    out.append(f"stage {i}: start epoch {st.start_epoch} not after {prev.start_epoch}")
                if not prev.conditions <= st.conditions:
                    out.append(f"stage {i}: condition set does not contain stage {i - 1}'s")
        if self.stages[-1].start_epoch >= total_epochs:
            out.append(
                f"last stage starts at epoch {self.stages[-1].start_epoch}, "
                f"must be before total epochs {total_epochs}"
            )
        return out

    def conditions_at(self, epoch: int) -> frozenset:
        current = self.stages[0].conditions
        for st in self.stages:
            if st.start_epoch <= epoch:
                current = st.conditions
            else:
                break
        return current

    def coverage(self, total_epochs: int) -> np.ndarray:
        """Fraction of all condition combinations in use at epochs 1..total_epochs."""
        n = len(ALL_CONDITIONS)
        return np.array(
            [len(self.conditions_at(t)) / n for t in range(1, total_epochs + 1)], dtype=float
        )


FULL_CURRICULUM = CurriculumSchedule((Stage(1, frozenset(ALL_CONDITIONS)),))
