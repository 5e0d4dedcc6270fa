"""Rule-based correctness evaluation of model answers.

Produces the binary correctness indicator for a (prediction, ground truth)
pair. Matching is deterministic and insensitive to case, surrounding
whitespace, and trailing punctuation. The rule is picked by answer type:
multiple choice compares the final standalone option letter, numeric
compares the last number with relative tolerance, open text uses normalized
exact match with a truth-containment fallback.

Scoring millions of masked trials through a judge model would be slow and
nondeterministic, so the primary path is rule-based; runs can additionally
log every verdict for offline adjudication (judge="external" in the run
config).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum

from .types import AnswerType

NUMERIC_REL_TOL = 1e-6

_EDGE_STRIP = " \t\r\n!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"
_CHOICE_RE = re.compile(r"\b([a-h])\b")
_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


class Rule(str, Enum):
    EXACT = "exact"
    CHOICE_LETTER = "choice_letter"
    NUMERIC = "numeric"
    CONTAINMENT = "containment"


@dataclass(frozen=True)
class JudgeVerdict:
    delta: int
    normalized_prediction: str
    normalized_truth: str
    rule_applied: Rule


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace, strip edge punctuation."""
    collapsed = " ".join(str(text).lower().split())
    return collapsed.strip(_EDGE_STRIP)


def extract_choice_letter(text: str) -> str | None:
    """Final standalone option letter (a-h), if any."""
    matches = _CHOICE_RE.findall(" ".join(text.lower().split()))
    return matches[-1] if matches else None


def extract_last_number(text: str) -> float | None:
    matches = _NUMBER_RE.findall(text)
    for raw in reversed(matches):
        try:
            value = float(raw)
        except ValueError:
            continue
        if math.isfinite(value):
            return value
    return None


def judge(prediction: str, ground_truth: str, answer_type: AnswerType) -> JudgeVerdict:
    """Binary correctness of a prediction against the ground truth.

    Unparseable predictions never raise; they score 0 with the attempted
    rule recorded.
    """
    if not ground_truth:
        raise ValueError("ground_truth must be non-empty")
    norm_pred = normalize(prediction)
    norm_truth = normalize(ground_truth)

    if answer_type is AnswerType.MULTIPLE_CHOICE:
        pred_letter = extract_choice_letter(prediction)
        truth_letter = extract_choice_letter(ground_truth)
        if truth_letter is not None and pred_letter is not None:
            return JudgeVerdict(int(pred_letter == truth_letter), norm_pred, norm_truth, Rule.CHOICE_LETTER)
        if truth_letter is not None or pred_letter is not None:
            # One side has an option letter and the other does not.
            return JudgeVerdict(0, norm_pred, norm_truth, Rule.CHOICE_LETTER)
        return JudgeVerdict(int(norm_pred == norm_truth), norm_pred, norm_truth, Rule.EXACT)

    if answer_type is AnswerType.NUMERIC:
        truth_value = extract_last_number(ground_truth)
        if truth_value is None:
            return JudgeVerdict(int(norm_pred == norm_truth), norm_pred, norm_truth, Rule.EXACT)
        pred_value = extract_last_number(prediction)
        if pred_value is None:
            return JudgeVerdict(0, norm_pred, norm_truth, Rule.NUMERIC)
        ok = math.isclose(pred_value, truth_value, rel_tol=NUMERIC_REL_TOL, abs_tol=0.0)
        return JudgeVerdict(int(ok), norm_pred, norm_truth, Rule.NUMERIC)

    # Open text: exact normalized match, else containment of the truth.
    if norm_pred == norm_truth:
        return JudgeVerdict(1, norm_pred, norm_truth, Rule.EXACT)
    contained = bool(norm_truth) and norm_truth in norm_pred
    return JudgeVerdict(int(contained), norm_pred, norm_truth, Rule.CONTAINMENT)
