#!/usr/bin/env python3
"""Fabricate a labels file with exact per-stratum counts, then plan from it.

Useful for checking distribution accounting and plan-size arithmetic against
externally reported stratum counts without running any scoring, e.g.:

    python scripts/make_label_fixture.py --out /tmp/fix \
        --method pism --task perception --easy 7827 --medium 4872 --hard 1454 --unsolved 6480
"""

import argparse
from pathlib import Path

from difficulty_sampler.stratify import build_training_plans, stratify, write_plans
from difficulty_sampler.synthetic import build_label_fixture, write_label_fixture
from difficulty_sampler.types import Label, Method


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--method", choices=("pism", "cmab"), default="pism")
    parser.add_argument("--task", choices=("perception", "reasoning"), default="perception")
    parser.add_argument("--easy", type=int, default=0)
    parser.add_argument("--medium", type=int, default=0)
    parser.add_argument("--hard", type=int, default=0)
    parser.add_argument("--unsolved", type=int, default=0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    counts = {
        Label.EASY: args.easy,
        Label.MEDIUM: args.medium,
        Label.HARD: args.hard,
        Label.UNSOLVED: args.unsolved,
    }
    manifest, results = build_label_fixture(counts, Method(args.method), task_type=args.task)
    manifest_path, labels_path = write_label_fixture(args.out, manifest, results)
    print(f"manifest: {manifest_path} ({len(manifest)} records)")
    print(f"labels:   {labels_path}")

    strat = stratify(results, manifest, task_type=args.task)
    print(f"total: {strat.total}")
    plans = build_training_plans(strat, args.seed)
    write_plans(plans, manifest, args.out)
    for plan in plans:
        stages = []
        if plan.sft_subset is not None:
            stages.append(f"sft[{plan.sft_subset.name}]={plan.sft_subset.size}")
        stages.append(f"grpo[{plan.grpo_subset.name}]={plan.grpo_subset.size}")
        print(f"{plan.name}: " + " ".join(stages))


if __name__ == "__main__":
    main()
