"""Turn per-sample difficulty results into strata, controls, and plans.

A stratification partitions the scored samples of one (method, task type)
slice into easy/medium/hard/unsolved, with unscored samples tracked
separately. From a stratification this module draws size-matched random
control subsets and generates the full training-plan grid: four GRPO-only
plans (mid+hard, size-matched random, unsolved, fullset) and eight SFT+GRPO
plans — rows pair an SFT stage with a GRPO stage, each stage either a real
stratum or its size-matched random control, in both stage orders:

    row 1: (mid, hard)      / (hard, mid)
    row 2: (rand_m, hard)   / (rand_h, mid)
    row 3: (mid, rand_h)    / (hard, rand_m)
    row 4: (rand_m, rand_h) / (rand_h, rand_m)

Random controls are drawn without replacement from the solved pool
(easy+medium+hard); when a control shares a plan with a real stratum the
draw excludes that stratum so plan stages stay disjoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cmab import DEFAULT_BANDS
from .manifest import DatasetManifest, write_records
from .perturb import LAMBDA_GRID
from .types import Label, Method, DifficultyResult, PipelineError, SOLVED_LABELS, STRATUM_LABELS
from .util import atomic_write_text, json_line, stable_hash

log = logging.getLogger(__name__)

# Subset name vocabulary used in plan names and report rows.
MID, HARD, RAND_M, RAND_H = "mid", "hard", "rand_m", "rand_h"

_LABEL_FOR_SUBSET = {MID: Label.MEDIUM, HARD: Label.HARD}


class StratifyError(PipelineError):
    pass


class MissingResult(StratifyError):
    def __init__(self, sample_id: str):
        super().__init__(f"no difficulty result for sample {sample_id!r}")
        self.sample_id = sample_id


class ConflictingResult(StratifyError):
    def __init__(self, sample_id: str):
        super().__init__(f"conflicting difficulty results for sample {sample_id!r}")
        self.sample_id = sample_id


class PoolTooSmall(StratifyError):
    pass


@dataclass
class StratifiedDataset:
    method: Method
    task_type: str
    strata: dict[Label, list[str]]
    unscored: list[str]
    total: int
    metrics: dict[str, float | None]
    manifest: DatasetManifest = field(repr=False)

    def stratum(self, label: Label) -> list[str]:
        return self.strata[label]

    def solved_ids(self) -> list[str]:
        ids = set()
        for label in SOLVED_LABELS:
            ids.update(self.strata[label])
        return [i for i in self._scored_order if i in ids]

    def scored_ids(self) -> list[str]:
        return list(self._scored_order)

    def __post_init__(self):
        scored = set()
        for ids in self.strata.values():
            scored.update(ids)
        self._scored_order = [s.id for s in self.manifest if s.id in scored]


@dataclass
class SubsetRef:
    name: str
    ids: list[str]

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass
class TrainingPlan:
    name: str
    method: Method
    task_type: str
    paradigm: str  # grpo_only | sft_then_grpo
    row: str  # grpo_only | sft_grpo_1..4
    combination: str | None  # a | b | None
    sft_subset: SubsetRef | None
    grpo_subset: SubsetRef
    seed: int

    def to_dict(self) -> dict:
        def subset(ref: SubsetRef | None) -> dict | None:
            if ref is None:
                return None
            return {"subset": ref.name, "size": ref.size, "ids": ref.ids}

        return {
            "name": self.name,
            "method": self.method.value,
            "task_type": self.task_type,
            "paradigm": self.paradigm,
            "row": self.row,
            "combination": self.combination,
            "seed": self.seed,
            "sft": subset(self.sft_subset),
            "grpo": subset(self.grpo_subset),
        }


@dataclass
class DistributionSummary:
    method: Method
    task_type: str
    counts: dict[Label, int]
    fractions: dict[Label, float]
    total: int
    unscored: int
    histogram: list[tuple[str, int]]


def stratify(
    results: list[DifficultyResult],
    manifest: DatasetManifest,
    task_type: str | None = None,
) -> StratifiedDataset:
    """Partition manifest samples by label, preserving manifest order.

    `results` must contain exactly one result (of a single method) per
    selected sample; byte-identical duplicates are tolerated (shard merges),
    disagreeing ones are an error.
    """
    methods = {r.method for r in results}
    if len(methods) > 1:
        raise StratifyError(f"results mix methods: {sorted(m.value for m in methods)}")
    method = methods.pop() if methods else Method.PISM

    by_id: dict[str, DifficultyResult] = {}
    for result in results:
        prior = by_id.get(result.sample_id)
        if prior is not None and prior != result:
            raise ConflictingResult(result.sample_id)
        by_id[result.sample_id] = result

    known = {s.id for s in manifest}
    unknown = [i for i in by_id if i not in known]
    if unknown:
        raise StratifyError(f"results reference unknown sample ids: {unknown[:5]}")

    selected = [s for s in manifest if task_type is None or s.task_type.value == task_type]
    strata: dict[Label, list[str]] = {label: [] for label in STRATUM_LABELS}
    unscored: list[str] = []
    metrics: dict[str, float | None] = {}
    for sample in selected:
        result = by_id.get(sample.id)
        if result is None:
            raise MissingResult(sample.id)
        metrics[sample.id] = result.metric
        if result.label is Label.UNSCORED:
            unscored.append(sample.id)
        else:
            strata[result.label].append(sample.id)

    total = sum(len(ids) for ids in strata.values())
    return StratifiedDataset(
        method=method,
        task_type=task_type or "all",
        strata=strata,
        unscored=unscored,
        total=total,
        metrics=metrics,
        manifest=manifest,
    )


def draw_without_replacement(pool: list[str], size: int, seed: int) -> list[str]:
    """Deterministic uniform draw; output keeps the pool's order."""
    if size > len(pool):
        raise PoolTooSmall(f"need {size} ids, pool has {len(pool)}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    chosen = rng.permutation(len(pool))[:size]
    picked = set(int(i) for i in chosen)
    return [sid for i, sid in enumerate(pool) if i in picked]


def sample_random_matched(
    strat: StratifiedDataset,
    match: Label,
    seed: int,
    exclude: set[str] | None = None,
    include_unsolved: bool = False,
) -> list[str]:
    """Random control subset of the same size as the `match` stratum.

    Drawn from the solved pool (optionally widened to unsolved samples),
    minus any explicit exclusions.
    """
    target = len(strat.strata[match])
    pool = strat.solved_ids()
    if include_unsolved:
        solved = set(pool)
        pool = [i for i in strat.scored_ids() if i in solved or i in set(strat.strata[Label.UNSOLVED])]
    if exclude:
        pool = [i for i in pool if i not in exclude]
    return draw_without_replacement(pool, target, seed)


def _subset(strat: StratifiedDataset, name: str, plan_name: str, stage: str, seed: int, exclude: set[str] | None = None) -> SubsetRef:
    if name in _LABEL_FOR_SUBSET:
        return SubsetRef(name, list(strat.strata[_LABEL_FOR_SUBSET[name]]))
    match = Label.MEDIUM if name == RAND_M else Label.HARD
    draw_seed = stable_hash(seed, plan_name, stage)
    return SubsetRef(name, sample_random_matched(strat, match, draw_seed, exclude=exclude))


def build_training_plans(strat: StratifiedDataset, seed: int) -> list[TrainingPlan]:
    """The full plan grid: 4 GRPO-only plans + 4 SFT+GRPO rows x {a, b}."""
    for label in (Label.MEDIUM, Label.HARD):
        if not strat.strata[label]:
            log.warning(
                "%s/%s: stratum %s is empty; dependent plans are degenerate",
                strat.method.value, strat.task_type, label.value,
            )
    prefix = f"{strat.method.value}/{strat.task_type}"
    plans: list[TrainingPlan] = []

    mid_ids = strat.strata[Label.MEDIUM]
    hard_ids = strat.strata[Label.HARD]
    mid_hard = set(mid_ids) | set(hard_ids)
    mid_hard_in_order = [i for i in strat.scored_ids() if i in mid_hard]

    def grpo_only(subset: SubsetRef) -> TrainingPlan:
        name = f"{prefix}/grpo_only/{subset.name}"
        return TrainingPlan(
            name=name,
            method=strat.method,
            task_type=strat.task_type,
            paradigm="grpo_only",
            row="grpo_only",
            combination=None,
            sft_subset=None,
            grpo_subset=subset,
            seed=seed,
        )

    plans.append(grpo_only(SubsetRef("mid+hard", mid_hard_in_order)))
    random_name = f"{prefix}/grpo_only/random"
    random_ids = draw_without_replacement(
        strat.solved_ids(), len(mid_hard), stable_hash(seed, random_name, "grpo")
    )
    plans.append(grpo_only(SubsetRef("random", random_ids)))
    plans.append(grpo_only(SubsetRef("unsolved", list(strat.strata[Label.UNSOLVED]))))
    plans.append(grpo_only(SubsetRef("fullset", strat.scored_ids())))

    # SFT+GRPO rows; combination b swaps the roles of mid and hard.
    rows_a = [(MID, HARD), (RAND_M, HARD), (MID, RAND_H), (RAND_M, RAND_H)]
    swap = {MID: HARD, HARD: MID, RAND_M: RAND_H, RAND_H: RAND_M}
    for row_index, (sft_a, grpo_a) in enumerate(rows_a, start=1):
        for combination, (sft_name, grpo_name) in (
            ("a", (sft_a, grpo_a)),
            ("b", (swap[sft_a], swap[grpo_a])),
        ):
            name = f"{prefix}/sft_then_grpo/{sft_name}__{grpo_name}/{combination}"
            # A random stage must stay disjoint from a real stratum stage.
            sft_excl = set(strat.strata[_LABEL_FOR_SUBSET[grpo_name]]) if grpo_name in _LABEL_FOR_SUBSET else None
            grpo_excl = set(strat.strata[_LABEL_FOR_SUBSET[sft_name]]) if sft_name in _LABEL_FOR_SUBSET else None
            sft_ref = _subset(strat, sft_name, name, "sft", seed, exclude=sft_excl)
            grpo_ref = _subset(strat, grpo_name, name, "grpo", seed, exclude=grpo_excl)
            plans.append(
                TrainingPlan(
                    name=name,
                    method=strat.method,
                    task_type=strat.task_type,
                    paradigm="sft_then_grpo",
                    row=f"sft_grpo_{row_index}",
                    combination=combination,
                    sft_subset=sft_ref,
                    grpo_subset=grpo_ref,
                    seed=seed,
                )
            )
    return plans


def _pism_bins(lambda_grid: tuple[float, ...]) -> list[str]:
    return [repr(r) for r in lambda_grid] + ["undefined"]


def _cmab_bins(bands: tuple[float, float, float, float]) -> list[str]:
    lo_easy, lo_hard, hi_hard, hi_easy = bands
    return [
        f"[0,{lo_easy})",
        f"[{lo_easy},{lo_hard})",
        f"[{lo_hard},{hi_hard}]",
        f"({hi_hard},{hi_easy}]",
        f"({hi_easy},inf)",
    ]


def summarize(
    strat: StratifiedDataset,
    lambda_grid: tuple[float, ...] = LAMBDA_GRID,
    bands: tuple[float, float, float, float] = DEFAULT_BANDS,
) -> DistributionSummary:
    """Per-stratum counts and fractions plus a metric histogram.

    Fractions are over all samples of the slice (strata plus unscored), so
    the five report rows always sum to one.
    """
    denominator = strat.total + len(strat.unscored)
    counts = {label: len(strat.strata[label]) for label in STRATUM_LABELS}
    fractions = {
        label: (counts[label] / denominator if denominator else 0.0) for label in STRATUM_LABELS
    }

    if strat.method is Method.PISM:
        bins = _pism_bins(lambda_grid)
        histogram = {b: 0 for b in bins}
        for sample_id in strat.scored_ids():
            metric = strat.metrics[sample_id]
            key = "undefined" if metric is None else repr(metric)
            if key not in histogram:
                histogram[key] = 0
            histogram[key] += 1
    else:
        bins = _cmab_bins(bands)
        histogram = {b: 0 for b in bins}
        lo_easy, lo_hard, hi_hard, hi_easy = bands
        for sample_id in strat.scored_ids():
            metric = strat.metrics[sample_id]
            if metric is None:
                continue
            if metric < lo_easy:
                key = bins[0]
            elif metric < lo_hard:
                key = bins[1]
            elif metric <= hi_hard:
                key = bins[2]
            elif metric <= hi_easy:
                key = bins[3]
            else:
                key = bins[4]
            histogram[key] += 1

    return DistributionSummary(
        method=strat.method,
        task_type=strat.task_type,
        counts=counts,
        fractions=fractions,
        total=strat.total,
        unscored=len(strat.unscored),
        histogram=list(histogram.items()),
    )


def write_strata(strat: StratifiedDataset, out_dir: Path | str) -> list[Path]:
    """strata/{method}/{task}/{label}.jsonl with full record copies."""
    out_dir = Path(out_dir)
    written = []
    for label in STRATUM_LABELS:
        path = out_dir / "strata" / strat.method.value / strat.task_type / f"{label.value}.jsonl"
        write_records(path, (strat.manifest.by_id(i) for i in strat.strata[label]))
        written.append(path)
    return written


def write_plans(plans: list[TrainingPlan], manifest: DatasetManifest, out_dir: Path | str) -> list[Path]:
    """plans/{name}/plan.json plus per-stage record files (no join needed)."""
    out_dir = Path(out_dir)
    written = []
    for plan in plans:
        plan_dir = out_dir / "plans" / plan.name
        plan_dir.mkdir(parents=True, exist_ok=True)
        doc = plan.to_dict()
        if plan.sft_subset is not None:
            write_records(plan_dir / "sft.jsonl", (manifest.by_id(i) for i in plan.sft_subset.ids))
            doc["sft"]["file"] = "sft.jsonl"
        write_records(plan_dir / "grpo.jsonl", (manifest.by_id(i) for i in plan.grpo_subset.ids))
        doc["grpo"]["file"] = "grpo.jsonl"
        path = plan_dir / "plan.json"
        atomic_write_text(path, json_line(doc) + "\n")
        written.append(path)
    return written
