"""Masking-sensitivity difficulty scoring.

For each sample, every ratio on the masking grid is tried K times with
independent seeded masks; each masked image goes to the backend and the
answer is judged against the ground truth. The per-ratio mean correctness
forms the sensitivity curve; the critical ratio is the smallest grid ratio
whose robust accuracy falls below tau. Labels: hard when the critical ratio
is <= lambda_hard, easy when >= lambda_easy or when the curve never crosses
tau, medium in between, unsolved when the sample is already wrong with no
masking at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import perturb
from .backend import BackendError, PredictRequest
from .judge import judge
from .manifest import Sample
from .types import Label, Method, DifficultyResult, PipelineError

log = logging.getLogger(__name__)

TAU = 0.1
LAMBDA_HARD = 0.4
LAMBDA_EASY = 0.7
K_TRIALS = 10


class EmptyTrialSet(PipelineError):
    pass


class IncompleteCurve(PipelineError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    """One masked trial: (sample, ratio, k) is unique per run."""

    sample_id: str
    mask_ratio: float
    trial_k: int
    delta: int
    answer_text: str
    seed_used: int

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "mask_ratio": self.mask_ratio,
            "trial_k": self.trial_k,
            "delta": self.delta,
            "answer_text": self.answer_text,
            "seed_used": self.seed_used,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrialRecord":
        return cls(
            sample_id=rec["sample_id"],
            mask_ratio=rec["mask_ratio"],
            trial_k=rec["trial_k"],
            delta=rec["delta"],
            answer_text=rec["answer_text"],
            seed_used=rec["seed_used"],
        )


@dataclass(frozen=True)
class GridPoint:
    mask_ratio: float
    p_c: float
    trial_count: int


@dataclass
class SensitivityCurve:
    sample_id: str
    grid: list[GridPoint]

    def p_at(self, ratio: float) -> float:
        for point in self.grid:
            if point.mask_ratio == ratio:
                return point.p_c
        raise KeyError(ratio)


@dataclass
class PismResult:
    sample_id: str
    critical_ratio: float | None
    label: Label

    def to_difficulty(self) -> DifficultyResult:
        return DifficultyResult(self.sample_id, Method.PISM, self.critical_ratio, self.label)


@dataclass
class PismRunParams:
    run_seed: int = 0
    k_trials: int = K_TRIALS
    tau: float = TAU
    lambda_hard: float = LAMBDA_HARD
    lambda_easy: float = LAMBDA_EASY
    lambda_grid: tuple[float, ...] = perturb.LAMBDA_GRID
    fill: int = 0
    patch_size: int | None = None
    full_grid: bool = False
    dump_masks: Path | None = None


@dataclass
class PismScore:
    """Outcome of scoring one sample: result plus bookkeeping."""

    result: PismResult
    curve: SensitivityCurve | None
    new_trials: int = 0
    failures: int = 0


def robust_accuracy(deltas: Iterable[int]) -> float:
    """Mean of binary trial outcomes (exact IEEE division of exact ints)."""
    deltas = list(deltas)
    if not deltas:
        raise EmptyTrialSet("no trials")
    return sum(deltas) / len(deltas)


def critical_ratio(curve: SensitivityCurve, tau: float = TAU) -> float | None:
    """Smallest grid ratio whose robust accuracy is strictly below tau.

    Returns None when no grid point qualifies. The minimum rule handles
    non-monotone curves exactly: a later recovery above tau does not cancel
    an earlier drop.
    """
    ratios = [p.mask_ratio for p in curve.grid]
    if ratios != sorted(ratios):
        raise IncompleteCurve("grid not in ascending ratio order")
    for point in curve.grid:
        if point.p_c < tau:
            return point.mask_ratio
    return None


def classify_pism(
    curve: SensitivityCurve,
    tau: float = TAU,
    lambda_hard: float = LAMBDA_HARD,
    lambda_easy: float = LAMBDA_EASY,
    lambda_grid: tuple[float, ...] = perturb.LAMBDA_GRID,
) -> PismResult:
    """Difficulty label from a sensitivity curve.

    The curve must cover the full grid, except that a curve whose unmasked
    point is already below tau may stop there (the short-circuited unsolved
    case: no further trial can change the label).
    """
    if not curve.grid or curve.grid[0].mask_ratio != lambda_grid[0]:
        raise IncompleteCurve(f"curve must start at ratio {lambda_grid[0]}")
    if curve.grid[0].p_c < tau:
        return PismResult(curve.sample_id, critical_ratio=lambda_grid[0], label=Label.UNSOLVED)
    if tuple(p.mask_ratio for p in curve.grid) != tuple(lambda_grid):
        raise IncompleteCurve("curve does not cover the ratio grid")
    star = critical_ratio(curve, tau)
    if star is None or star >= lambda_easy:
        label = Label.EASY
    elif star <= lambda_hard:
        label = Label.HARD
    else:
        label = Label.MEDIUM
    return PismResult(curve.sample_id, critical_ratio=star, label=label)


def score_sample_pism(
    sample: Sample,
    image_bytes: bytes,
    client,
    params: PismRunParams,
    existing: Mapping[tuple[float, int], TrialRecord] | None = None,
    emit: Callable[[TrialRecord], None] | None = None,
) -> PismScore:
    """Run (or finish) the ratio x trial grid for one sample.

    Trials already present in `existing` are reused; new ones are passed to
    `emit` as soon as they are judged so the caller can persist them before
    aggregation. Backend failures after retry exhaustion make the sample
    unscored; the missing cells stay absent from the log so a later resume
    retries exactly those.
    """
    existing = existing or {}
    new_trials = 0
    rows: list[GridPoint] = []

    def run_row(ratio_index: int, ratio: float) -> GridPoint | None:
        nonlocal new_trials
        deltas = []
        for k in range(1, params.k_trials + 1):
            record = existing.get((ratio, k))
            if record is None:
                seed = perturb.derive_trial_seed(params.run_seed, sample.id, ratio_index, k)
                spec = perturb.MaskSpec(ratio=ratio, seed=seed, fill=params.fill, patch_size=params.patch_size)
                try:
                    masked = perturb.mask_image_bytes(image_bytes, spec)
                except perturb.DecodeError as exc:
                    log.warning("sample %s: image decode failed: %s", sample.id, exc)
                    return None
                if params.dump_masks is not None:
                    name = f"{sample.id}_{ratio:.1f}_{k}.png"
                    Path(params.dump_masks).mkdir(parents=True, exist_ok=True)
                    Path(params.dump_masks, name).write_bytes(masked)
                try:
                    response = client.predict(PredictRequest(sample.id, masked, sample.question))
                except BackendError as exc:
                    log.warning("sample %s ratio %.1f trial %d failed: %s", sample.id, ratio, k, exc)
                    return None
                verdict = judge(response.answer_text, sample.ground_truth, sample.answer_type)
                record = TrialRecord(
                    sample_id=sample.id,
                    mask_ratio=ratio,
                    trial_k=k,
                    delta=verdict.delta,
                    answer_text=response.answer_text,
                    seed_used=seed,
                )
                if emit is not None:
                    emit(record)
                new_trials += 1
            deltas.append(record.delta)
        return GridPoint(ratio, robust_accuracy(deltas), len(deltas))

    for ratio_index, ratio in enumerate(params.lambda_grid):
        point = run_row(ratio_index, ratio)
        if point is None:
            result = PismResult(sample.id, critical_ratio=None, label=Label.UNSCORED)
            return PismScore(result, curve=None, new_trials=new_trials, failures=1)
        rows.append(point)
        if ratio_index == 0 and point.p_c < params.tau and not params.full_grid:
            break

    curve = SensitivityCurve(sample.id, rows)
    result = classify_pism(curve, params.tau, params.lambda_hard, params.lambda_easy, params.lambda_grid)
    return PismScore(result, curve=curve, new_trials=new_trials)
