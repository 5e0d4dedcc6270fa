"""CLI: `cmab-trace-export export --model ID --manifest FILE --out DIR --max-tokens N`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import ExportJob, export_traces


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmab-trace-export",
        description="Run a vision-language model with attention capture and "
        "write one CMAB1 trace file per sample plus answers.jsonl.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export traces for a manifest")
    p.add_argument("--model", required=True, help="model id: toy[:k=v,...] or hf:<repo id>")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--root", type=Path, default=None, help="image root (default: manifest directory)")
    p.add_argument("--limit", type=int, default=None, help="export only the first N samples")
    p.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    job = ExportJob(
        model_id=args.model,
        manifest_path=args.manifest,
        out_dir=args.out,
        max_tokens=args.max_tokens,
        root=args.root,
        limit=args.limit,
        device=args.device,
    )
    written = export_traces(job)
    print(f"exported {len(written)} traces to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
