"""Run a model over a manifest and write CMAB1 trace files.

Output contract (consumed by the difficulty pipeline's replay backend):
one `{id}.trace` file per sample in the CMAB1 format plus `answers.jsonl`
with one `{"id", "answer", "token_count"}` record per exported sample.
Greedy decoding with seeded weights and single-threaded tensor ops makes
re-exports byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image

from .toy_model import GenerationResult, ToyModel

log = logging.getLogger(__name__)


@dataclass
class ExportJob:
    model_id: str
    manifest_path: Path
    out_dir: Path
    max_tokens: int = 64
    root: Path | None = None
    limit: int | None = None
    device: str = "cpu"


def load_model(model_id: str, device: str = "cpu"):
    if model_id == "toy" or model_id.startswith("toy:"):
        return ToyModel.from_id(model_id)
    from .hf_model import HfModel

    return HfModel(model_id.removeprefix("hf:"), device=device)


def read_manifest(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            for field in ("id", "image", "question"):
                if field not in record:
                    raise ValueError(f"manifest line {lineno}: missing field {field!r}")
            records.append(record)
    return records


def format_trace(sample_id: str, model_id: str, result: GenerationResult) -> str:
    lines = [
        f"CMAB1 sample_id={sample_id} layers={result.layers} img={result.img_tokens} "
        f"txt={result.txt_tokens} gen={result.generated_count} model={model_id}"
    ]
    for t in range(result.generated_count):
        for l in range(result.layers):
            lines.append(
                f"t={t + 1} l={l + 1} "
                f"s_img={result.s_img[t, l]:.10e} s_txt={result.s_txt[t, l]:.10e}"
            )
    return "\n".join(lines) + "\n"


def export_traces(job: ExportJob) -> list[Path]:
    """One trace file per manifest sample; answers.jsonl beside them.

    Model-load failures abort; per-sample generation failures are skipped
    with a logged reason and excluded from answers.jsonl.
    """
    model = load_model(job.model_id, job.device)
    records = read_manifest(Path(job.manifest_path))
    if job.limit is not None:
        records = records[: job.limit]
    root = Path(job.root) if job.root else Path(job.manifest_path).parent
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # Reduction order changes with thread count; pin it for byte-stable output.
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    written: list[Path] = []
    answers: list[dict] = []
    try:
        for record in records:
            sample_id = record["id"]
            try:
                image = Image.open(root / record["image"])
                image.load()
                result = model.generate(image, record["question"], job.max_tokens)
            except Exception as exc:
                log.warning("sample %s: generation failed, skipping: %s", sample_id, exc)
                continue
            path = out_dir / f"{sample_id}.trace"
            path.write_text(format_trace(sample_id, model.model_id, result), encoding="utf-8")
            written.append(path)
            answers.append(
                {"id": sample_id, "answer": result.answer_text, "token_count": result.generated_count}
            )
    finally:
        torch.set_num_threads(previous_threads)

    answers_path = out_dir / "answers.jsonl"
    answers_path.write_text(
        "".join(json.dumps(a, ensure_ascii=False, sort_keys=True) + "\n" for a in answers),
        encoding="utf-8",
    )
    return written
