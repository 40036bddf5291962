"""Domain vocabulary shared by every stage of the pipeline.

A prediction is ``str | None``: a SQL string, or ``None`` for an abstention.
The literal ``"null"`` exists only on the wire (see :func:`sql_from_wire`).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

SqlOrNull = Optional[str]

NULL_WIRE = "null"
_PLACEHOLDER_RE = re.compile(r"<[^<>]+>")


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


def sql_from_wire(value: object) -> SqlOrNull:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ValidationError(f"expected SQL string or 'null', got {type(value).__name__}")
    if value == NULL_WIRE:
        return None
    if not value.strip():
        raise ValidationError("empty SQL string")
    return value


def sql_to_wire(value: SqlOrNull) -> str:
    return NULL_WIRE if value is None else value


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def fill_placeholders(masked_text: str, bindings: Mapping[str, tuple[str, ...]]) -> str:
    """Substitute bound values back into ``masked_text`` in occurrence order."""
    cursors = {key: 0 for key in bindings}

    def sub(match: re.Match) -> str:
        key = match.group(0)
        values = bindings.get(key)
        if not values or cursors[key] >= len(values):
            return key
        value = values[cursors[key]]
        cursors[key] += 1
        return value

    return _PLACEHOLDER_RE.sub(sub, masked_text)


@dataclass(frozen=True)
class QuestionRecord:
    """One benchmark question.

    ``bindings`` maps each placeholder to the original substrings it replaced,
    in order of appearance (a question can mention two procedures).
    """

    id: str
    raw_text: str
    masked_text: Optional[str] = None
    templated_text: Optional[str] = None
    bindings: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("question id must be non-empty")
        frozen = {k: tuple(v) for k, v in self.bindings.items()}
        object.__setattr__(self, "bindings", MappingProxyType(frozen))
        if self.masked_text is None:
            return
        for key in _PLACEHOLDER_RE.findall(self.masked_text):
            if key not in self.bindings:
                raise ValidationError(f"{self.id}: placeholder {key} has no binding")
        restored = fill_placeholders(self.masked_text, self.bindings)
        if normalize_ws(restored) != normalize_ws(self.raw_text):
            raise ValidationError(f"{self.id}: bindings do not restore the raw text")

    @property
    def model_input(self) -> str:
        """Text handed to SQL generation: the templated form when present."""
        return self.templated_text or self.raw_text


class Stage(enum.IntEnum):
    STAGE1 = 0
    REFLECTED = 1
    REPAIRED = 2
    GATED = 3

    @property
    def wire(self) -> str:
        return {0: "Stage1", 1: "Reflected", 2: "Repaired", 3: "Gated"}[self.value]

    @classmethod
    def from_wire(cls, name: str) -> "Stage":
        for stage in cls:
            if stage.wire == name:
                return stage
        raise ValidationError(f"unknown stage {name!r}")


@dataclass(frozen=True)
class Candidate:
    prediction: SqlOrNull
    stage: Stage
    member_index: int = 0
    notes: str = ""

    def advance(self, stage: Stage, prediction: SqlOrNull, note: str = "") -> "Candidate":
        if stage < self.stage:
            raise ValueError(f"cannot move candidate back from {self.stage.wire} to {stage.wire}")
        notes = "; ".join(n for n in (self.notes, note) if n)
        return Candidate(prediction, stage, self.member_index, notes)

    def to_json(self) -> dict:
        return {
            "prediction": sql_to_wire(self.prediction),
            "stage": self.stage.wire,
            "member_index": self.member_index,
            "notes": self.notes,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Candidate":
        return cls(
            prediction=sql_from_wire(obj["prediction"]),
            stage=Stage.from_wire(obj["stage"]),
            member_index=int(obj.get("member_index", 0)),
            notes=obj.get("notes", ""),
        )


@dataclass(frozen=True)
class GoldLabel:
    id: str
    answer: SqlOrNull

    @property
    def answerable(self) -> bool:
        return self.answer is not None


@dataclass(frozen=True)
class OutcomeLedger:
    id: str
    answerable: bool
    attempted: bool
    correct: Optional[bool] = None

    def __post_init__(self) -> None:
        needs_correct = self.answerable and self.attempted
        if needs_correct != (self.correct is not None):
            raise ValidationError(
                f"{self.id}: correct must be set iff the question is answerable and attempted"
            )


def phi(outcome: OutcomeLedger, c: float) -> float:
    """Per-question reliability reward with penalty ``c``."""
    if c < 0:
        raise ValueError("penalty must be non-negative")
    if outcome.answerable:
        if not outcome.attempted:
            return 0.0
        return 1.0 if outcome.correct else -float(c)
    return -float(c) if outcome.attempted else 1.0
