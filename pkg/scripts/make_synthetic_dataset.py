#!/usr/bin/env python3
"""Build a synthetic dataset with known target labels for stub-backend runs.

Emits manifest.jsonl, images/, stub_rules.json, and expected_labels.json
under --out. Pair it with:

    difficulty-sampler run --manifest OUT/manifest.jsonl \
        --backend stub --stub-rules OUT/stub_rules.json --out RUN_DIR
"""

import argparse
from pathlib import Path

from difficulty_sampler.synthetic import build_synthetic_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--count", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--image-size", type=int, default=16, help="square image side in pixels")
    args = parser.parse_args()

    dataset = build_synthetic_dataset(
        args.out, count=args.count, seed=args.seed, image_size=(args.image_size, args.image_size)
    )
    print(f"wrote {args.count} samples under {dataset.root}")
    print(f"manifest: {dataset.manifest_path}")
    print(f"stub rules: {dataset.rules_path}")


if __name__ == "__main__":
    main()
