"""Run configuration, bounded-parallel execution, durable state, reports.

A run directory is self-describing: the config echo (config.json) is
written first and is the source of truth on resume; scoring appends to
append-only logs (trials.jsonl for masking trials, cmab_results.jsonl for
attention scoring) with one flushed line per committed record; aggregation
is always recomputed from the logs, so killing a run at any point and
resuming yields outputs byte-identical to an uninterrupted run. On
completion the logs are compacted into a canonical order, all declared
outputs are emitted deterministically, and their content hash goes into
report.json.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import cmab as cmab_mod
from . import pism as pism_mod
from .backend import BackendConfig, BackendError, PredictRequest, create_backend
from .judge import judge
from .manifest import DatasetManifest, Sample, load_manifest
from .perturb import LAMBDA_GRID
from .stratify import build_training_plans, stratify, summarize, write_plans, write_strata
from .types import ConfigError, DifficultyResult, Label, Method, STRATUM_LABELS
from .util import atomic_write_text, json_line, read_jsonl_tolerant, sha256_file

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_UNSCORED = 2

# Files never included in the output content hash.
_HASH_EXCLUDE_FILES = {"config.json", "report.json", "backend.json"}
_HASH_EXCLUDE_DIRS = {"cache", "masks"}


class ConfigMismatch(ConfigError):
    """Stored run config differs from the requested one."""


@dataclass
class Thresholds:
    tau: float = 0.1
    lambda_hard: float = 0.4
    lambda_easy: float = 0.7
    k_trials: int = 10
    epsilon: float = 1e-8
    cmab_bands: tuple[float, float, float, float] = cmab_mod.DEFAULT_BANDS
    lambda_grid: tuple[float, ...] = LAMBDA_GRID

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_hard": self.lambda_hard,
            "lambda_easy": self.lambda_easy,
            "k_trials": self.k_trials,
            "epsilon": self.epsilon,
            "cmab_bands": list(self.cmab_bands),
            "lambda_grid": list(self.lambda_grid),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        d = dict(d)
        if "cmab_bands" in d:
            d["cmab_bands"] = tuple(d["cmab_bands"])
        if "lambda_grid" in d:
            d["lambda_grid"] = tuple(d["lambda_grid"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad thresholds: {exc}") from None


@dataclass
class RunConfig:
    manifest: str
    backend: BackendConfig
    method: str = "both"  # pism | cmab | both
    seed: int = 0
    concurrency: int = 4
    out: str | None = None
    image_root: str | None = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    fill: int = 0
    patch_size: int | None = None
    full_grid: bool = False
    dump_masks: str | None = None
    judge_mode: str = "rules"  # rules | external

    def validate(self) -> None:
        if self.method not in ("pism", "cmab", "both"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.judge_mode not in ("rules", "external"):
            raise ConfigError(f"unknown judge mode {self.judge_mode!r}")
        if not (0 <= self.seed < 2**63):
            raise ConfigError("seed must be a non-negative 63-bit integer")
        self.backend.validate()

    def methods(self) -> list[Method]:
        if self.method == "both":
            return [Method.PISM, Method.CMAB]
        return [Method(self.method)]

    def echo_dict(self) -> dict:
        """The semantic config: everything that affects scored outputs.

        out, concurrency, and dump_masks are execution details and may vary
        between a run and its resume.
        """
        return {
            "manifest": self.manifest,
            "backend": self.backend.to_dict(),
            "method": self.method,
            "seed": self.seed,
            "image_root": self.image_root,
            "thresholds": self.thresholds.to_dict(),
            "fill": self.fill,
            "patch_size": self.patch_size,
            "full_grid": self.full_grid,
            "judge_mode": self.judge_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "manifest" not in d:
            raise ConfigError("config is missing 'manifest'")
        if "backend" not in d:
            raise ConfigError("config is missing 'backend'")
        d["backend"] = BackendConfig.from_dict(d["backend"])
        d["thresholds"] = Thresholds.from_dict(d.get("thresholds", {}))
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)


@dataclass
class RunReport:
    totals: dict  # method -> task_type -> label -> count
    trial_count: int
    failure_count: int
    unscored: int
    manifest_size: int
    wall_clock_s: float
    config: dict
    content_hash: str

    def to_dict(self) -> dict:
        return {
            "totals": self.totals,
            "trial_count": self.trial_count,
            "failure_count": self.failure_count,
            "unscored": self.unscored,
            "manifest_size": self.manifest_size,
            "wall_clock_s": self.wall_clock_s,
            "config": self.config,
            "content_hash": self.content_hash,
        }

    @property
    def exit_code(self) -> int:
        return EXIT_UNSCORED if self.unscored else EXIT_OK


class AppendLog:
    """Append-only JSONL log with one flushed line per committed record.

    Loading tolerates a crash-torn trailing line (dropped) and duplicate
    records (first occurrence wins); when either is present the file is
    compacted in place before new appends, so a resumed run never extends
    a torn line.
    """

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._fh = None

    def load(self, key_fn) -> dict:
        records: dict = {}
        if self.path.exists():
            rows, clean = read_jsonl_tolerant(self.path)
            kept = []
            for row in rows:
                key = key_fn(row)
                if key not in records:
                    records[key] = row
                    kept.append(row)
            if not clean or len(kept) != len(rows):
                atomic_write_text(self.path, "".join(json_line(r) + "\n" for r in kept))
        return records

    def append(self, record: dict) -> None:
        line = json_line(record) + "\n"
        with self._lock:
            if self._fh is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = open(self.path, "a", encoding="utf-8")
            self._fh.write(line)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def finalize(self, records: list[dict]) -> None:
        """Rewrite in canonical order once scoring is complete."""
        self.close()
        atomic_write_text(self.path, "".join(json_line(r) + "\n" for r in records))


def _pism_trial_key(row: dict) -> tuple:
    return (row["sample_id"], row["mask_ratio"], row["trial_k"])


def _score_pism(
    config: RunConfig,
    manifest: DatasetManifest,
    client,
    run_dir: Path,
) -> tuple[dict[str, pism_mod.PismScore], int, int]:
    """Score (or finish scoring) every sample; returns scores, trials, failures."""
    thresholds = config.thresholds
    params = pism_mod.PismRunParams(
        run_seed=config.seed,
        k_trials=thresholds.k_trials,
        tau=thresholds.tau,
        lambda_hard=thresholds.lambda_hard,
        lambda_easy=thresholds.lambda_easy,
        lambda_grid=thresholds.lambda_grid,
        fill=config.fill,
        patch_size=config.patch_size,
        full_grid=config.full_grid,
        dump_masks=Path(config.dump_masks) if config.dump_masks else None,
    )
    trial_log = AppendLog(run_dir / "trials.jsonl")
    existing_rows = trial_log.load(_pism_trial_key)
    existing: dict[str, dict] = {}
    for (sample_id, ratio, k), row in existing_rows.items():
        existing.setdefault(sample_id, {})[(ratio, k)] = pism_mod.TrialRecord.from_record(row)

    def score_one(sample: Sample) -> pism_mod.PismScore:
        try:
            data = sample.image_path(manifest.root).read_bytes()
        except OSError as exc:
            log.warning("sample %s: cannot read image: %s", sample.id, exc)
            result = pism_mod.PismResult(sample.id, None, Label.UNSCORED)
            return pism_mod.PismScore(result, curve=None, failures=1)
        return pism_mod.score_sample_pism(
            sample,
            data,
            client,
            params,
            existing.get(sample.id),
            emit=lambda rec: trial_log.append(rec.to_record()),
        )

    scores: dict[str, pism_mod.PismScore] = {}
    failures = 0
    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            for sample, score in zip(manifest, pool.map(score_one, manifest)):
                scores[sample.id] = score
                failures += score.failures
    finally:
        trial_log.close()

    # Canonical log order: manifest position, then ratio, then trial.
    ratio_index = {r: i for i, r in enumerate(thresholds.lambda_grid)}
    all_rows = trial_log.load(_pism_trial_key)
    ordered = sorted(
        all_rows.values(),
        key=lambda r: (
            manifest.order_index(r["sample_id"]),
            ratio_index.get(r["mask_ratio"], len(ratio_index)),
            r["trial_k"],
        ),
    )
    trial_log.finalize(ordered)
    return scores, len(ordered), failures


def _score_cmab(
    config: RunConfig,
    manifest: DatasetManifest,
    client,
    run_dir: Path,
) -> tuple[dict[str, cmab_mod.CmabResult], int]:
    thresholds = config.thresholds
    result_log = AppendLog(run_dir / "cmab_results.jsonl")
    done = result_log.load(lambda row: row["id"])

    def to_result(row: dict) -> cmab_mod.CmabResult:
        return cmab_mod.CmabResult(
            sample_id=row["id"],
            rho_bar=row["rho_bar"],
            per_token_rho=row.get("per_token_rho", []),
            correct=row["correct"],
            label=Label(row["label"]),
            answer_text=row.get("answer_text", ""),
        )

    def to_row(result: cmab_mod.CmabResult) -> dict:
        return {
            "id": result.sample_id,
            "rho_bar": result.rho_bar,
            "per_token_rho": result.per_token_rho,
            "correct": result.correct,
            "label": result.label.value,
            "answer_text": result.answer_text,
        }

    def score_one(sample: Sample) -> tuple[cmab_mod.CmabResult, bool]:
        if sample.id in done:
            return to_result(done[sample.id]), False
        try:
            data = sample.image_path(manifest.root).read_bytes()
            response, trace = client.predict_with_trace(
                PredictRequest(sample.id, data, sample.question)
            )
            if trace.generated_count != response.generated_token_count:
                raise cmab_mod.TraceError(
                    f"trace has {trace.generated_count} tokens, response reports "
                    f"{response.generated_token_count}"
                )
        except (OSError, BackendError, cmab_mod.TraceError) as exc:
            log.warning("sample %s: attention scoring failed: %s", sample.id, exc)
            result = cmab_mod.CmabResult(sample_id=sample.id, rho_bar=None, label=Label.UNSCORED)
            result_log.append(to_row(result))
            return result, True
        verdict = judge(response.answer_text, sample.ground_truth, sample.answer_type)
        result = cmab_mod.result_from_trace(
            trace,
            correct=verdict.delta == 1,
            answer_text=response.answer_text,
            epsilon=thresholds.epsilon,
            bands=thresholds.cmab_bands,
        )
        result_log.append(to_row(result))
        return result, False

    results: dict[str, cmab_mod.CmabResult] = {}
    failures = 0
    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            for sample, (result, failed) in zip(manifest, pool.map(score_one, manifest)):
                results[sample.id] = result
                failures += failed
    finally:
        result_log.close()

    ordered = [to_row(results[s.id]) for s in manifest if s.id in results]
    result_log.finalize(ordered)
    return results, failures


def _difficulty_results(
    method: Method,
    manifest: DatasetManifest,
    pism_scores: dict[str, pism_mod.PismScore],
    cmab_results: dict[str, cmab_mod.CmabResult],
) -> list[DifficultyResult]:
    out = []
    for sample in manifest:
        if method is Method.PISM:
            out.append(pism_scores[sample.id].result.to_difficulty())
        else:
            r = cmab_results[sample.id]
            out.append(DifficultyResult(sample.id, Method.CMAB, r.rho_bar, r.label))
    return out


def content_hash(run_dir: Path) -> str:
    """SHA-256 over (relative path, file digest) of all declared outputs."""
    run_dir = Path(run_dir)
    entries = []
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(run_dir)
        if rel.name in _HASH_EXCLUDE_FILES or rel.name.startswith("."):
            continue
        if rel.parts and rel.parts[0] in _HASH_EXCLUDE_DIRS:
            continue
        entries.append((rel.as_posix(), sha256_file(path)))
    h = hashlib.sha256()
    for rel, digest in entries:
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update(bytes.fromhex(digest))
        h.update(b"\n")
    return h.hexdigest()


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def emit_outputs(
    config: RunConfig,
    manifest: DatasetManifest,
    run_dir: Path,
    pism_scores: dict[str, pism_mod.PismScore],
    cmab_results: dict[str, cmab_mod.CmabResult],
) -> dict:
    """Write labels, per-method result files, strata, plans, summary tables.

    Everything here is a pure function of the scoring logs and config, and
    all orderings are canonical, so re-emission is byte-stable.
    """
    methods = config.methods()
    thresholds = config.thresholds

    labels_lines = []
    for sample in manifest:
        for method in methods:
            if method is Method.PISM:
                rec = pism_scores[sample.id].result.to_difficulty().to_record()
            else:
                r = cmab_results[sample.id]
                rec = DifficultyResult(sample.id, Method.CMAB, r.rho_bar, r.label).to_record()
            labels_lines.append(json_line(rec))
    atomic_write_text(run_dir / "labels.jsonl", "".join(line + "\n" for line in labels_lines))

    if Method.PISM in methods:
        lines = []
        for sample in manifest:
            score = pism_scores[sample.id]
            star = score.result.critical_ratio
            grid = [[p.mask_ratio, p.p_c, p.trial_count] for p in (score.curve.grid if score.curve else [])]
            lines.append(
                json_line(
                    {
                        "id": sample.id,
                        "lambda_star": "undefined" if star is None else star,
                        "label": score.result.label.value,
                        "p_c": grid,
                    }
                )
            )
        atomic_write_text(run_dir / "pism_results.jsonl", "".join(line + "\n" for line in lines))

    if config.judge_mode == "external":
        # Raw predictions joined with ground truth, for offline adjudication.
        adjudication = []
        trials_path = run_dir / "trials.jsonl"
        trial_rows = read_jsonl_tolerant(trials_path)[0] if trials_path.exists() else []
        for row in trial_rows:
            sample = manifest.by_id(row["sample_id"])
            adjudication.append(
                json_line(
                    {
                        "id": row["sample_id"],
                        "mask_ratio": row["mask_ratio"],
                        "trial_k": row["trial_k"],
                        "prediction": row["answer_text"],
                        "ground_truth": sample.ground_truth,
                        "answer_type": sample.answer_type.value,
                        "rule_delta": row["delta"],
                    }
                )
            )
        atomic_write_text(run_dir / "adjudication.jsonl", "".join(line + "\n" for line in adjudication))

    summary_rows = []
    histogram_rows = []
    totals: dict = {}
    tasks = sorted({s.task_type.value for s in manifest})
    for method in methods:
        results = _difficulty_results(method, manifest, pism_scores, cmab_results)
        totals[method.value] = {}
        for task in tasks:
            strat = stratify(results, manifest, task_type=task)
            write_strata(strat, run_dir)
            plans = build_training_plans(strat, config.seed)
            write_plans(plans, manifest, run_dir)
            summary = summarize(strat, thresholds.lambda_grid, thresholds.cmab_bands)
            label_counts = {}
            for stratum in STRATUM_LABELS:
                summary_rows.append(
                    [method.value, task, stratum.value, summary.counts[stratum], summary.fractions[stratum]]
                )
                label_counts[stratum.value] = summary.counts[stratum]
            denominator = summary.total + summary.unscored
            unscored_fraction = summary.unscored / denominator if denominator else 0.0
            summary_rows.append([method.value, task, Label.UNSCORED.value, summary.unscored, unscored_fraction])
            label_counts[Label.UNSCORED.value] = summary.unscored
            totals[method.value][task] = label_counts
            for bin_label, count in summary.histogram:
                histogram_rows.append([method.value, task, bin_label, count])

    _write_csv(run_dir / "summary.csv", ["method", "task_type", "stratum", "count", "fraction"], summary_rows)
    _write_csv(run_dir / "histogram.csv", ["method", "task_type", "bin", "count"], histogram_rows)
    return totals


def run_pipeline(config: RunConfig, run_dir: Path | str | None = None) -> RunReport:
    """Score all samples, stratify, emit plans and reports.

    Idempotent: rerunning over an existing (partial or complete) run
    directory with the same semantic config completes missing work and
    re-emits outputs; a differing config raises ConfigMismatch.
    """
    config.validate()
    if run_dir is None:
        if not config.out:
            raise ConfigError("no output directory configured")
        run_dir = config.out
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    echo = config.echo_dict()
    echo_path = run_dir / "config.json"
    if echo_path.exists():
        stored = json.loads(echo_path.read_text(encoding="utf-8"))
        if stored != echo:
            raise ConfigMismatch(f"stored config in {echo_path} differs from the requested one")
    else:
        atomic_write_text(echo_path, json.dumps(echo, indent=2, sort_keys=True) + "\n")

    started = time.monotonic()
    manifest = load_manifest(config.manifest, root=config.image_root)
    client = create_backend(config.backend)

    pism_scores: dict[str, pism_mod.PismScore] = {}
    cmab_results: dict[str, cmab_mod.CmabResult] = {}
    trial_count = 0
    failures = 0
    unscored_ids: set[str] = set()

    methods = config.methods()
    if Method.PISM in methods:
        pism_scores, trial_count, pism_failures = _score_pism(config, manifest, client, run_dir)
        failures += pism_failures
        unscored_ids.update(
            sid for sid, score in pism_scores.items() if score.result.label is Label.UNSCORED
        )
    if Method.CMAB in methods:
        cmab_results, cmab_failures = _score_cmab(config, manifest, client, run_dir)
        failures += cmab_failures
        unscored_ids.update(
            sid for sid, result in cmab_results.items() if result.label is Label.UNSCORED
        )

    totals = emit_outputs(config, manifest, run_dir, pism_scores, cmab_results)

    report = RunReport(
        totals=totals,
        trial_count=trial_count,
        failure_count=failures,
        unscored=len(unscored_ids),
        manifest_size=len(manifest),
        wall_clock_s=time.monotonic() - started,
        config=echo,
        content_hash=content_hash(run_dir),
    )
    atomic_write_text(run_dir / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def resume(run_dir: Path | str, concurrency: int | None = None, check: dict | None = None) -> RunReport:
    """Complete a partial run; outputs match an uninterrupted run exactly."""
    run_dir = Path(run_dir)
    echo_path = run_dir / "config.json"
    if not echo_path.is_file():
        raise ConfigError(f"{run_dir} has no config echo; nothing to resume")
    echo = json.loads(echo_path.read_text(encoding="utf-8"))
    if check:
        for key, value in check.items():
            if echo.get(key) != value:
                raise ConfigMismatch(f"stored {key}={echo.get(key)!r} differs from requested {value!r}")
    config = RunConfig.from_dict(echo)
    if concurrency is not None:
        config.concurrency = concurrency
    return run_pipeline(config, run_dir)
