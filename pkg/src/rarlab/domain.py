"""Vocabulary shared by the simulator, recommender and trainers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

import numpy as np

QuestionId = int


@dataclass(frozen=True)
class Interaction:
    question: QuestionId
    correctness: int

    def __post_init__(self):
        if self.correctness not in (0, 1):
            raise ValueError(f"correctness must be 0 or 1, got {self.correctness!r}")
        if self.question < 0:
            raise ValueError(f"question index must be non-negative, got {self.question}")


@dataclass(frozen=True)
class HistoricalRecord:
    """Append-only sequence of (question, correctness) pairs."""

    steps: tuple[Interaction, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def questions(self) -> list[int]:
        return [s.question for s in self.steps]

    @property
    def correctness(self) -> list[int]:
        return [s.correctness for s in self.steps]

    @property
    def last_question(self) -> QuestionId | None:
        return self.steps[-1].question if self.steps else None


def append_interaction(record: HistoricalRecord, q: QuestionId, y: int) -> HistoricalRecord:
    return HistoricalRecord(record.steps + (Interaction(int(q), int(y)),))


class LearningTarget(frozenset):
    """Non-empty set of question indices a student aims to master."""

    def __new__(cls, questions: Iterable[QuestionId] = ()):
        obj = super().__new__(cls, (int(q) for q in questions))
        if not obj:
            raise ValueError("a learning target must contain at least one question")
        if min(obj) < 0:
            raise ValueError("question indices must be non-negative")
        return obj

    def sorted(self) -> list[int]:
        return sorted(self)

    def indicator(self, num_questions: int) -> np.ndarray:
        if max(self) >= num_questions:
            raise ValueError(f"target question {max(self)} outside a set of {num_questions}")
        v = np.zeros(num_questions)
        v[list(self)] = 1.0
        return v


def target_from_concepts(concepts: Iterable[Hashable],
                         concept_map: Mapping[Hashable, Iterable[QuestionId]]) -> LearningTarget:
    questions: set[int] = set()
    for c in concepts:
        if c not in concept_map:
            raise KeyError(f"unknown concept {c!r}")
        questions.update(concept_map[c])
    return LearningTarget(questions)


@dataclass(frozen=True)
class MasterySnapshot:
    begin: float
    end: float
    supremum: float


def learning_effect(snapshot: MasterySnapshot) -> float:
    """Normalised mastery gain (end - begin) / (supremum - begin)."""
    denom = snapshot.supremum - snapshot.begin
    if not np.isfinite([snapshot.begin, snapshot.end, snapshot.supremum]).all():
        raise ValueError(f"non-finite mastery values in {snapshot}")
    if denom <= 0:
        raise ValueError(
            f"degenerate learning effect: supremum {snapshot.supremum} "
            f"must exceed begin mastery {snapshot.begin}"
        )
    return (snapshot.end - snapshot.begin) / denom
