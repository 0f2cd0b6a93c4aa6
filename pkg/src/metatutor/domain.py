"""Shared vocabulary: curricula for both tutors and the replay-corpus format."""

from __future__ import annotations

import enum
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_FEATURE_DIM = 152
N_TRAINING = 20
PROBLEMS_PER_LEVEL = 4
N_LEVELS = 5


class Tutor(enum.Enum):
    Logic = "logic"
    Probability = "probability"


class Phase(enum.Enum):
    PreTest = "pre"
    Training = "train"
    PostTest = "post"


class Strategy(enum.Enum):
    ForwardChaining = "FC"
    BackwardChaining = "BC"


class Presentation(enum.Enum):
    Default = "default"
    WorkedExample = "we"


class InterventionAction(enum.IntEnum):
    NoIntervention = 0
    Nudge = 1
    DirectPresent = 2

    @property
    def token(self) -> str:
        return _ACTION_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "InterventionAction":
        try:
            return _TOKEN_ACTIONS[token]
        except KeyError:
            raise ValueError(f"unknown action token {token!r}") from None


_ACTION_TOKENS = {
    InterventionAction.NoIntervention: "none",
    InterventionAction.Nudge: "nudge",
    InterventionAction.DirectPresent: "present",
}
_TOKEN_ACTIONS = {v: k for k, v in _ACTION_TOKENS.items()}
N_ACTIONS = len(InterventionAction)


class MetaGroup(enum.IntEnum):
    Default = 0
    StrOnly = 1
    StrTime = 2


class CorpusError(ValueError):
    """Malformed or inconsistent replay corpus."""


class Score(float):
    """A problem or test score, always within [0, 100]."""

    def __new__(cls, value: float) -> "Score":
        value = float(value)
        if not (0.0 <= value <= 100.0):
            raise ValueError(f"score {value!r} outside [0, 100]")
        return super().__new__(cls, value)


@dataclass(frozen=True)
class Problem:
    id: str
    tutor: Tutor
    phase: Phase
    level: int
    index_in_level: int
    presentation: Presentation = Presentation.Default
    isomorphic_of: str | None = None

    @property
    def strategy(self) -> Strategy:
        if self.tutor is Tutor.Probability:
            return Strategy.BackwardChaining
        return Strategy.ForwardChaining


def level_of(position: int) -> int:
    """Level (1-5) of a 1-based logic training position."""
    _check_position(position)
    return (position - 1) // PROBLEMS_PER_LEVEL + 1


def is_last_in_level(position: int) -> bool:
    _check_position(position)
    return position % PROBLEMS_PER_LEVEL == 0


def _check_position(position: int) -> None:
    if not 1 <= position <= N_TRAINING:
        raise ValueError(f"training position {position} outside [1, {N_TRAINING}]")


def build_curriculum(tutor: Tutor) -> tuple[Problem, ...]:
    """Fixed problem order for ``tutor``; every student sees the same sequence."""
    tutor = Tutor(tutor)
    if tutor is Tutor.Logic:
        pre = [Problem(f"L-pre-{i}", tutor, Phase.PreTest, 0, i) for i in (1, 2)]
        train = [
            Problem(f"L-train-{p}", tutor, Phase.Training, level_of(p), (p - 1) % PROBLEMS_PER_LEVEL + 1)
            for p in range(1, N_TRAINING + 1)
        ]
        post = [
            Problem(f"L-post-{i}", tutor, Phase.PostTest, 0, i,
                    isomorphic_of=pre[i - 1].id if i <= len(pre) else None)
            for i in range(1, 7)
        ]
    else:
        pre = [Problem(f"P-pre-{i}", tutor, Phase.PreTest, 0, i) for i in range(1, 15)]
        train = [Problem(f"P-train-{i}", tutor, Phase.Training, 0, i) for i in range(1, 13)]
        post = [
            Problem(f"P-post-{i}", tutor, Phase.PostTest, 0, i,
                    isomorphic_of=pre[i - 1].id if i <= len(pre) else None)
            for i in range(1, 21)
        ]
    return tuple(pre + train + post)


@dataclass(frozen=True)
class TransitionRecord:
    student_id: str
    problem_id: str
    position: int
    state: tuple[float, ...]
    action: InterventionAction
    reward: float
    done: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "state", tuple(float(v) for v in self.state))
        object.__setattr__(self, "action", InterventionAction(self.action))
        if not all(math.isfinite(v) for v in self.state):
            raise CorpusError("state contains non-finite values")
        if not (0.0 <= self.reward <= 100.0):
            raise CorpusError(f"reward out of range: {self.reward!r}")

    def to_json(self) -> dict:
        return {
            "student_id": self.student_id,
            "problem_id": self.problem_id,
            "position": self.position,
            "state": list(self.state),
            "action": self.action.token,
            "reward": self.reward,
            "done": self.done,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TransitionRecord":
        missing = [k for k in ("student_id", "problem_id", "position", "state", "action", "reward", "done")
                   if k not in obj]
        if missing:
            raise CorpusError(f"missing fields: {', '.join(missing)}")
        if not isinstance(obj["done"], bool):
            raise CorpusError("done must be a boolean")
        if isinstance(obj["position"], bool) or not isinstance(obj["position"], int):
            raise CorpusError("position must be an integer")
        try:
            action = InterventionAction.from_token(obj["action"])
        except (ValueError, TypeError) as exc:
            raise CorpusError(str(exc)) from None
        return cls(
            student_id=str(obj["student_id"]),
            problem_id=str(obj["problem_id"]),
            position=obj["position"],
            state=tuple(obj["state"]),
            action=action,
            reward=float(obj["reward"]),
            done=obj["done"],
        )


@dataclass(frozen=True)
class ReplayCorpus:
    """Logged transitions with each student's records contiguous and ordered by position.

    Build through :meth:`from_records`, which sorts and validates.
    """

    records: tuple[TransitionRecord, ...] = ()
    feature_dim: int | None = None
    student_index: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord]) -> "ReplayCorpus":
        by_student: dict[str, list[TransitionRecord]] = {}
        feature_dim = None
        for rec in records:
            if feature_dim is None:
                feature_dim = len(rec.state)
            elif len(rec.state) != feature_dim:
                raise CorpusError(f"feature length {len(rec.state)} != corpus dimension {feature_dim}")
            by_student.setdefault(rec.student_id, []).append(rec)

        ordered: list[TransitionRecord] = []
        index: dict[str, tuple[int, ...]] = {}
        for sid, recs in by_student.items():
            recs.sort(key=lambda r: r.position)
            positions = [r.position for r in recs]
            if len(set(positions)) != len(positions):
                raise CorpusError(f"student {sid!r} has duplicate positions")
            for r in recs[:-1]:
                if r.done:
                    raise CorpusError(f"student {sid!r}: done=true before the end of the trajectory")
            if not recs[-1].done:
                raise CorpusError(f"student {sid!r}: trajectory does not end with done=true")
            start = len(ordered)
            ordered.extend(recs)
            index[sid] = tuple(range(start, len(ordered)))
        return cls(tuple(ordered), feature_dim, index)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def students(self) -> list[str]:
        return list(self.student_index)

    def subset(self, student_ids: Iterable[str]) -> "ReplayCorpus":
        recs = [self.records[i] for sid in student_ids for i in self.student_index[sid]]
        if not recs:
            return ReplayCorpus(feature_dim=self.feature_dim)
        return ReplayCorpus.from_records(recs)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays for training; ``next_state`` rows are zero where ``done``."""
        n = len(self.records)
        dim = self.feature_dim or 0
        states = np.array([r.state for r in self.records], dtype=np.float64).reshape(n, dim)
        next_states = np.zeros_like(states)
        if n:
            next_states[:-1] = states[1:]
        dones = np.array([r.done for r in self.records], dtype=bool)
        next_states[dones] = 0.0
        next_positions = np.array(
            [self.records[i + 1].position if not r.done else 0 for i, r in enumerate(self.records)],
            dtype=np.int64,
        )
        return {
            "states": states,
            "actions": np.array([int(r.action) for r in self.records], dtype=np.int64),
            "rewards": np.array([r.reward for r in self.records], dtype=np.float64),
            "next_states": next_states,
            "dones": dones,
            "positions": np.array([r.position for r in self.records], dtype=np.int64),
            "next_positions": next_positions,
        }


def load_corpus(source: IO) -> ReplayCorpus:
    """Parse line-delimited JSON records from a text or binary stream."""
    records = []
    feature_dim = None
    for lineno, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise CorpusError("record must be a JSON object")
            rec = TransitionRecord.from_json(obj)
        except (json.JSONDecodeError, CorpusError, TypeError, ValueError) as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        if feature_dim is None:
            feature_dim = len(rec.state)
        elif len(rec.state) != feature_dim:
            raise CorpusError(f"line {lineno}: feature length {len(rec.state)} != {feature_dim}")
        records.append(rec)
    if not records:
        return ReplayCorpus()
    return ReplayCorpus.from_records(records)


def save_corpus(corpus: ReplayCorpus, sink: IO) -> None:
    binary = not isinstance(sink, io.TextIOBase)
    for rec in corpus.records:
        line = json.dumps(rec.to_json(), separators=(",", ":")) + "\n"
        sink.write(line.encode("utf-8") if binary else line)


def corpus_to_bytes(corpus: ReplayCorpus) -> bytes:
    buf = io.BytesIO()
    save_corpus(corpus, buf)
    return buf.getvalue()


def split_corpus(corpus: ReplayCorpus, fraction: float, seed: int) -> tuple[ReplayCorpus, ReplayCorpus]:
    """Partition by student: round(fraction * n_students) students go to the training side."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    students = sorted(corpus.student_index)
    n_train = int(math.floor(fraction * len(students) + 0.5))
    order = np.random.default_rng(seed).permutation(len(students))
    train_ids = sorted(students[i] for i in order[:n_train])
    test_ids = sorted(students[i] for i in order[n_train:])
    return corpus.subset(train_ids), corpus.subset(test_ids)


def stable_id_hash(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


def seed_sequence(seed: int, *keys: str | int) -> np.random.SeedSequence:
    """Independent stream for ``keys`` under a master seed; string keys hash stably."""
    entropy = [int(seed)] + [k if isinstance(k, int) else stable_id_hash(k) for k in keys]
    return np.random.SeedSequence(entropy)


def derived_rng(seed: int, *keys: str | int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def slot_mask(position: int, worked_examples: Sequence[int] = ()) -> tuple[bool, bool, bool]:
    """Allowed actions at a training slot; evaluation and worked-example slots allow only no-op."""
    if is_last_in_level(position) or position in worked_examples:
        return (True, False, False)
    return (True, True, True)
