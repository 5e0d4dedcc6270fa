"""Shared enums, result records, and the error hierarchy root."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid run configuration; maps to CLI exit code 1."""


class AnswerType(str, Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    NUMERIC = "numeric"
    OPEN_TEXT = "open_text"


class TaskType(str, Enum):
    PERCEPTION = "perception"
    REASONING = "reasoning"


class Method(str, Enum):
    PISM = "pism"
    CMAB = "cmab"


class Label(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    UNSOLVED = "unsolved"
    UNSCORED = "unscored"


# Strata a solved sample can land in; order is the canonical report order.
SOLVED_LABELS = (Label.EASY, Label.MEDIUM, Label.HARD)
STRATUM_LABELS = (Label.EASY, Label.MEDIUM, Label.HARD, Label.UNSOLVED)


@dataclass(frozen=True)
class DifficultyResult:
    """One (sample, method) outcome: metric value and assigned label.

    metric is the critical masking ratio for the masking method (None when
    the curve never crosses the threshold) and the mean attention balance
    for the attention method (None only when unscored).
    """

    sample_id: str
    method: Method
    metric: float | None
    label: Label

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "method": self.method.value,
            "metric": self.metric,
            "label": self.label.value,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DifficultyResult":
        return cls(
            sample_id=rec["id"],
            method=Method(rec["method"]),
            metric=rec["metric"],
            label=Label(rec["label"]),
        )
