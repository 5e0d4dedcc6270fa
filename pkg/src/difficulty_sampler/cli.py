"""Command-line interface.

Subcommands: validate, pism, cmab, run, stratify, plan, report, resume.
Exit codes: 0 success, 1 configuration/usage error, 2 completed with
unscored samples.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .manifest import load_manifest, validate_images
from .orchestrate import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    RunConfig,
    content_hash,
    resume,
    run_pipeline,
)
from .stratify import build_training_plans, stratify, summarize, write_plans, write_strata
from .types import ConfigError, DifficultyResult, PipelineError, STRATUM_LABELS
from .util import atomic_write_text, read_jsonl

log = logging.getLogger(__name__)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run config file (JSON mirroring RunConfig)")
    parser.add_argument("--manifest", help="dataset manifest (JSONL)")
    parser.add_argument("--out", help="run output directory")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--concurrency", type=int, help="max in-flight backend calls")
    parser.add_argument("--backend", choices=("http", "replay", "stub"), help="backend kind")
    parser.add_argument("--endpoint", help="http backend endpoint URL")
    parser.add_argument("--stub-rules", help="stub backend rules file")
    parser.add_argument("--cache-dir", help="response cache directory")
    parser.add_argument("--trace-dir", help="replay trace directory")
    parser.add_argument("--model", help="model name sent to the http backend")
    parser.add_argument("--image-root", help="base directory for image refs")
    parser.add_argument("--dump-masks", help="directory to persist masked images")
    parser.add_argument("--full-grid", action="store_true", default=None,
                        help="complete the masking grid even for unsolved samples")


def _build_config(args: argparse.Namespace, method: str | None) -> RunConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        doc = {}
    backend_doc = doc.get("backend", {})
    for key, flag in (
        ("kind", args.backend),
        ("endpoint", args.endpoint),
        ("stub_rules", args.stub_rules),
        ("cache_dir", args.cache_dir),
        ("trace_dir", args.trace_dir),
        ("model", args.model),
    ):
        if flag is not None:
            backend_doc[key] = flag
    if "kind" not in backend_doc:
        raise ConfigError("no backend configured (use --backend or a config file)")
    doc["backend"] = backend_doc
    for key, flag in (
        ("manifest", args.manifest),
        ("out", args.out),
        ("seed", args.seed),
        ("concurrency", args.concurrency),
        ("image_root", args.image_root),
        ("dump_masks", args.dump_masks),
        ("full_grid", args.full_grid),
    ):
        if flag is not None:
            doc[key] = flag
    if method is not None:
        doc["method"] = method
    if "manifest" not in doc:
        raise ConfigError("no manifest given (use --manifest or a config file)")
    return RunConfig.from_dict(doc)


def _load_results(labels_path: Path, method: str | None) -> list[DifficultyResult]:
    results = [DifficultyResult.from_record(rec) for rec in read_jsonl(labels_path)]
    methods = {r.method for r in results}
    if method is not None:
        results = [r for r in results if r.method.value == method]
    elif len(methods) > 1:
        raise ConfigError(
            f"labels file mixes methods {sorted(m.value for m in methods)}; pass --method"
        )
    if not results:
        raise ConfigError("no results selected from labels file")
    return results


def cmd_validate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest, root=args.root)
    issues = validate_images(manifest)
    print(f"parsed {len(manifest)} samples from {args.manifest}")
    for issue in issues:
        print(f"invalid image: {issue}", file=sys.stderr)
    if issues:
        print(f"{len(issues)} samples with unresolvable images", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    print("all image refs resolve and decode")
    return EXIT_OK


def cmd_score(args: argparse.Namespace, method: str | None) -> int:
    config = _build_config(args, method)
    report = run_pipeline(config)
    for method_name, tasks in report.totals.items():
        for task, counts in tasks.items():
            print(f"{method_name}/{task}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"trials={report.trial_count} failures={report.failure_count} unscored={report.unscored}")
    print(f"content_hash={report.content_hash}")
    return report.exit_code


def _stratifications(args: argparse.Namespace):
    manifest = load_manifest(args.manifest, root=None)
    results = _load_results(Path(args.labels), args.method)
    tasks = [args.task] if args.task else sorted({s.task_type.value for s in manifest})
    for task in tasks:
        yield stratify(results, manifest, task_type=task), manifest


def cmd_stratify(args: argparse.Namespace) -> int:
    out = Path(args.out)
    summary_lines = []
    for strat, _manifest in _stratifications(args):
        write_strata(strat, out)
        summary = summarize(strat)
        for label in STRATUM_LABELS:
            summary_lines.append(
                f"{strat.method.value}/{strat.task_type}/{label.value}: "
                f"{summary.counts[label]} ({summary.fractions[label]:.3f})"
            )
        summary_lines.append(f"{strat.method.value}/{strat.task_type}/total: {strat.total}")
    print("\n".join(summary_lines))
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    out = Path(args.out)
    for strat, manifest in _stratifications(args):
        plans = build_training_plans(strat, args.seed)
        write_plans(plans, manifest, out)
        for plan in plans:
            sizes = []
            if plan.sft_subset is not None:
                sizes.append(f"sft[{plan.sft_subset.name}]={plan.sft_subset.size}")
            sizes.append(f"grpo[{plan.grpo_subset.name}]={plan.grpo_subset.size}")
            print(f"{plan.name}: " + " ".join(sizes))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "report.json"
    if not report_path.is_file():
        raise ConfigError(f"{run_dir} has no report.json; run or resume first")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    report["content_hash"] = content_hash(run_dir)
    atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"content_hash={report['content_hash']}")
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    check = {}
    if args.seed is not None:
        check["seed"] = args.seed
    report = resume(args.run_dir, concurrency=args.concurrency, check=check or None)
    print(f"trials={report.trial_count} unscored={report.unscored}")
    print(f"content_hash={report.content_hash}")
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difficulty-sampler",
        description="Score image-question difficulty via masking sensitivity "
        "and attention balance, then stratify and emit training plans.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a manifest and check every image decodes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", default=None, help="image root (default: manifest directory)")

    for name, method, help_text in (
        ("pism", "pism", "run masking-sensitivity scoring"),
        ("cmab", "cmab", "run attention-balance scoring"),
        ("run", None, "run the method(s) configured in the config file"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p)
        p.set_defaults(method=method)

    p = sub.add_parser("stratify", help="partition a labels file into strata")
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("pism", "cmab"), default=None)
    p.add_argument("--task", choices=("perception", "reasoning"), default=None)

    p = sub.add_parser("plan", help="emit the training-plan grid from a labels file")
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("pism", "cmab"), default=None)
    p.add_argument("--task", choices=("perception", "reasoning"), default=None)

    p = sub.add_parser("report", help="recompute the content hash of a run directory")
    p.add_argument("--run", required=True)

    p = sub.add_parser("resume", help="complete a partial run")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int, default=None, help="must match the stored config")
    p.add_argument("--concurrency", type=int, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command in ("pism", "cmab", "run"):
            return cmd_score(args, args.method)
        if args.command == "stratify":
            return cmd_stratify(args)
        if args.command == "plan":
            return cmd_plan(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "resume":
            return cmd_resume(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
