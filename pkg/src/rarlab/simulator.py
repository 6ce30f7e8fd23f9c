"""Rule-based simulated students over a prerequisite graph of concepts.

A student holds a latent mastery in [0, 1] per concept. Answering a question
on concept ``c`` succeeds with probability ``sigmoid(slope * (mastery[c] - offset))``
and then raises ``mastery[c]`` by a gain gated by the weakest prerequisite::

    mastery[c] += rate * gate * (1 - mastery[c])
    rate = gain if correct else gain_wrong
    gate = min(mastery[p] for p in prerequisites(c))   # 1 with no prerequisites

The per-step reward is the change in summed target mastery divided by
``m_sup - m_b``, so an episode's rewards add up to its learning effect.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._kv import parse_kv, read_kv
from .domain import (HistoricalRecord, Interaction, LearningTarget, MasterySnapshot,
                     learning_effect, target_from_concepts)


class KnowledgeGraph:
    """Concepts with prerequisite edges; every question belongs to one concept."""

    def __init__(self, num_concepts: int, edges, question_concept):
        self.num_concepts = int(num_concepts)
        self.edges = frozenset((int(a), int(b)) for a, b in edges)
        self.question_concept = np.asarray(question_concept, dtype=np.intp)
        self._validate()
        self.prerequisites: list[tuple[int, ...]] = [
            tuple(sorted(a for a, b in self.edges if b == c)) for c in range(self.num_concepts)
        ]
        self.concept_questions: dict[int, frozenset[int]] = {
            c: frozenset(np.flatnonzero(self.question_concept == c).tolist())
            for c in range(self.num_concepts)
        }

    @property
    def num_questions(self) -> int:
        return len(self.question_concept)

    def _validate(self) -> None:
        n = self.num_concepts
        if n <= 0:
            raise ValueError("graph needs at least one concept")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references an unknown concept")
            if a == b:
                raise ValueError(f"self-loop on concept {a}")
        qc = self.question_concept
        if qc.ndim != 1 or len(qc) == 0:
            raise ValueError("graph needs at least one question")
        if qc.min() < 0 or qc.max() >= n:
            raise ValueError("a question maps to an unknown concept")
        missing = sorted(set(range(n)) - set(qc.tolist()))
        if missing:
            raise ValueError(f"concepts without questions: {missing}")
        # Kahn's algorithm
        indeg = [0] * n
        out: list[list[int]] = [[] for _ in range(n)]
        for a, b in self.edges:
            indeg[b] += 1
            out[a].append(b)
        ready = [c for c in range(n) if indeg[c] == 0]
        seen = 0
        while ready:
            c = ready.pop()
            seen += 1
            for d in out[c]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
        if seen != n:
            raise ValueError("prerequisite edges contain a cycle")

    @classmethod
    def parse(cls, text: str, source: str = "<graph>") -> KnowledgeGraph:
        header = None
        edges = []
        qmap: dict[int, int] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            try:
                if header is None:
                    if len(parts) != 4 or parts[0] != "concepts" or parts[2] != "questions":
                        raise ValueError("expected header 'concepts N questions M'")
                    header = int(parts[1]), int(parts[3])
                elif parts[0] == "edge" and len(parts) == 3:
                    edges.append((int(parts[1]), int(parts[2])))
                elif parts[0] == "question" and len(parts) == 3:
                    q = int(parts[1])
                    if q in qmap:
                        raise ValueError(f"question {q} listed twice")
                    qmap[q] = int(parts[2])
                else:
                    raise ValueError(f"unrecognised line {raw.strip()!r}")
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        if header is None:
            raise ValueError(f"{source}: empty graph file")
        n_concepts, n_questions = header
        if sorted(qmap) != list(range(n_questions)):
            raise ValueError(f"{source}: questions must be exactly 0..{n_questions - 1}")
        return cls(n_concepts, edges, [qmap[q] for q in range(n_questions)])

    @classmethod
    def load(cls, path) -> KnowledgeGraph:
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    @classmethod
    def default(cls) -> KnowledgeGraph:
        text = resources.files("rarlab").joinpath("data/default_graph.txt").read_text()
        return cls.parse(text, "default_graph.txt")

    def dumps(self) -> str:
        lines = [f"concepts {self.num_concepts} questions {self.num_questions}"]
        lines += [f"edge {a} {b}" for a, b in sorted(self.edges)]
        lines += [f"question {q} {c}" for q, c in enumerate(self.question_concept.tolist())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    horizon: int = 30
    k_targets: int = 2
    gain: float = 0.3
    gain_wrong: float = 0.1
    slope: float = 10.0
    offset: float = 0.5
    init_mastery_max: float = 0.3
    graph: str | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.k_targets < 1:
            raise ValueError("k_targets must be >= 1")
        if not 0 < self.gain <= 1:
            raise ValueError("gain must lie in (0, 1]")
        if not 0 <= self.gain_wrong < self.gain:
            raise ValueError("gain_wrong must lie in [0, gain)")
        if self.slope <= 0:
            raise ValueError("slope must be positive")
        if not 0 <= self.init_mastery_max < 1:
            raise ValueError("init_mastery_max must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict[str, str], base_dir: Path | None = None) -> SimConfig:
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ValueError(f"unknown simulator config keys: {unknown}")
        kwargs = {}
        for key, value in raw.items():
            if key == "graph":
                p = Path(value)
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                kwargs[key] = str(p)
                continue
            conv = int if types[key] == "int" else float
            try:
                kwargs[key] = conv(value)
            except ValueError:
                raise ValueError(f"simulator config key {key!r}: cannot parse {value!r}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> SimConfig:
        path = Path(path)
        return cls.from_dict(read_kv(path), path.parent)

    @classmethod
    def parse(cls, text: str) -> SimConfig:
        return cls.from_dict(parse_kv(text))

    def load_graph(self) -> KnowledgeGraph:
        return KnowledgeGraph.default() if self.graph is None else KnowledgeGraph.load(self.graph)


@dataclass
class SimStudent:
    mastery: np.ndarray
    target: LearningTarget
    rng: np.random.Generator
    seed: int
    steps_taken: int = 0
    begin_mastery: float = 0.0
    target_weights: np.ndarray | None = None  # target questions per concept
    questions: list[int] = field(default_factory=list)
    responses: list[int] = field(default_factory=list)

    @property
    def record(self) -> HistoricalRecord:
        return HistoricalRecord(tuple(Interaction(q, y)
                                      for q, y in zip(self.questions, self.responses)))


@dataclass(frozen=True)
class StepOutcome:
    correctness: int
    reward: float
    done: bool


class EnvironmentContract(Protocol):
    """What a recommender needs from any student environment."""

    num_questions: int
    horizon: int

    def reset(self, seed: int) -> SimStudent: ...

    def step(self, student: SimStudent, q: int) -> StepOutcome: ...

    def observe_record(self, student: SimStudent) -> HistoricalRecord: ...

    def observe_target(self, student: SimStudent) -> LearningTarget: ...

    def target_mastery(self, student: SimStudent) -> float: ...


class StudentBatch(list):
    """Students whose mastery vectors are rows of one shared matrix."""

    def __init__(self, students: Sequence[SimStudent]):
        super().__init__(students)
        self.mastery = np.stack([s.mastery for s in students])
        for i, s in enumerate(students):
            s.mastery = self.mastery[i]
        self.weights = np.stack([s.target_weights for s in students])
        self.denom = np.array([len(s.target) - s.begin_mastery for s in students])


class RuleBasedEnv:
    """Simulator environment; one instance serves any number of students."""

    def __init__(self, config: SimConfig | None = None, graph: KnowledgeGraph | None = None):
        self.config = config or SimConfig()
        self.graph = graph if graph is not None else self.config.load_graph()
        if self.config.k_targets > self.graph.num_concepts:
            raise ValueError(
                f"k_targets={self.config.k_targets} exceeds {self.graph.num_concepts} concepts"
            )
        self.num_questions = self.graph.num_questions
        self.horizon = self.config.horizon
        C = self.graph.num_concepts
        width = max(1, max(len(p) for p in self.graph.prerequisites))
        # padded with C, which indexes an appended column of ones
        self._prereq_idx = np.full((C, width), C, dtype=np.intp)
        for c, p in enumerate(self.graph.prerequisites):
            self._prereq_idx[c, :len(p)] = p

    def reset(self, seed: int) -> SimStudent:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, int(seed)])
        mastery = rng.uniform(0.0, cfg.init_mastery_max, size=self.graph.num_concepts)
        concepts = rng.choice(self.graph.num_concepts, size=cfg.k_targets, replace=False)
        target = target_from_concepts(concepts.tolist(), self.graph.concept_questions)
        weights = np.bincount(self.graph.question_concept[target.sorted()],
                              minlength=self.graph.num_concepts).astype(np.float64)
        student = SimStudent(mastery=mastery, target=target, rng=rng, seed=int(seed),
                             target_weights=weights)
        student.begin_mastery = self.target_mastery(student)
        return student

    def reset_batch(self, seeds: Sequence[int]) -> StudentBatch:
        return StudentBatch([self.reset(s) for s in seeds])

    def _probability(self, m: np.ndarray) -> np.ndarray:
        x = self.config.slope * (m - self.config.offset)
        return 0.5 + 0.5 * np.tanh(0.5 * x)

    def answer_probability(self, student: SimStudent, q: int) -> float:
        c = self.graph.question_concept[q]
        return float(self._probability(np.array([student.mastery[c]]))[0])

    def target_mastery(self, student: SimStudent) -> float:
        return float(student.target_weights @ student.mastery)

    def supremum(self, student: SimStudent) -> float:
        return float(len(student.target))

    def snapshot(self, student: SimStudent) -> MasterySnapshot:
        return MasterySnapshot(student.begin_mastery, self.target_mastery(student),
                               self.supremum(student))

    def learning_effect(self, student: SimStudent) -> float:
        return learning_effect(self.snapshot(student))

    def observe_record(self, student: SimStudent) -> HistoricalRecord:
        return student.record

    def observe_target(self, student: SimStudent) -> LearningTarget:
        return student.target

    def _advance(self, students: Sequence[SimStudent], mastery: np.ndarray, weights: np.ndarray,
                 denom: np.ndarray, actions) -> tuple[np.ndarray, np.ndarray]:
        """Shared update for ``step`` and ``step_batch``; mutates ``mastery`` rows in place."""
        actions = np.asarray(actions, dtype=np.intp)
        for s in students:
            if s.steps_taken >= self.horizon:
                raise RuntimeError(f"episode already finished after {self.horizon} steps")
        if actions.min() < 0 or actions.max() >= self.num_questions:
            raise IndexError(f"question outside [0, {self.num_questions})")
        cfg = self.config
        rows = np.arange(len(students))
        concepts = self.graph.question_concept[actions]
        m = mastery[rows, concepts]
        draws = np.array([s.rng.random() for s in students])
        y = (draws < self._probability(m)).astype(np.int64)
        padded = np.concatenate([mastery, np.ones((len(students), 1))], axis=1)
        gate = padded[rows[:, None], self._prereq_idx[concepts]].min(axis=1)
        rate = np.where(y == 1, cfg.gain, cfg.gain_wrong)
        new = np.clip(m + rate * gate * (1.0 - m), 0.0, 1.0)
        mastery[rows, concepts] = new
        rewards = weights[rows, concepts] * (new - m) / denom
        for s, q, yi in zip(students, actions.tolist(), y.tolist()):
            s.questions.append(q)
            s.responses.append(yi)
            s.steps_taken += 1
        return y, rewards

    def step(self, student: SimStudent, q: int) -> StepOutcome:
        mastery = student.mastery.reshape(1, -1)  # a view: updates land in the student
        denom = np.array([self.supremum(student) - student.begin_mastery])
        y, rewards = self._advance([student], mastery, student.target_weights[None, :], denom,
                                   [q])
        return StepOutcome(int(y[0]), float(rewards[0]), student.steps_taken == self.horizon)

    def step_batch(self, batch: StudentBatch, actions) -> tuple[np.ndarray, np.ndarray]:
        """Step every student in ``batch`` once; returns (correctness, rewards).

        Identical, bit for bit, to calling :meth:`step` on each student in turn.
        """
        return self._advance(batch, batch.mastery, batch.weights, batch.denom, actions)

    def target_mastery_batch(self, batch: StudentBatch) -> np.ndarray:
        return (batch.weights * batch.mastery).sum(axis=1)


def reset(seed: int, config: SimConfig | None = None) -> SimStudent:
    return RuleBasedEnv(config).reset(seed)
