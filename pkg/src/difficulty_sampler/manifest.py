"""Dataset manifest: load, validate, and address input samples.

The manifest is line-delimited JSON, one record per line, with required
fields id, image, question, answer, answer_type, task_type. Unknown fields
are preserved verbatim so that load -> dump round-trips byte-identically
modulo insignificant whitespace. Image files are validated lazily (at first
use) by default; `validate_images` checks them eagerly in bulk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .types import AnswerType, PipelineError, TaskType
from .util import json_line

REQUIRED_FIELDS = ("id", "image", "question", "answer", "answer_type", "task_type")


class ManifestError(PipelineError):
    pass


class ParseError(ManifestError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(ManifestError):
    def __init__(self, sample_id: str, first_line: int, line: int):
        super().__init__(f"duplicate id {sample_id!r} on lines {first_line} and {line}")
        self.sample_id = sample_id
        self.first_line = first_line
        self.line = line


class MissingImage(ManifestError):
    def __init__(self, sample_id: str, path: Path, reason: str = "not found"):
        super().__init__(f"sample {sample_id!r}: image {path} ({reason})")
        self.sample_id = sample_id
        self.path = path
        self.reason = reason


@dataclass(frozen=True)
class Sample:
    """One image-question-answer record.

    `record` holds the full original JSON object (known and unknown fields)
    so serialization preserves everything; the typed attributes are parsed
    views of it.
    """

    id: str
    image_ref: str
    question: str
    ground_truth: str
    answer_type: AnswerType
    task_type: TaskType
    record: dict = field(repr=False)

    def image_path(self, root: Path) -> Path:
        return Path(root) / self.image_ref


@dataclass
class DatasetManifest:
    samples: list[Sample]
    root: Path

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self, sample_id: str) -> Sample:
        return self._index[sample_id]

    def __post_init__(self):
        self._index = {s.id: s for s in self.samples}

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def order_index(self, sample_id: str) -> int:
        if not hasattr(self, "_order"):
            self._order = {s.id: i for i, s in enumerate(self.samples)}
        return self._order[sample_id]


def parse_sample(record: dict, line: int = 0) -> Sample:
    if not isinstance(record, dict):
        raise ParseError(line, "record is not an object")
    missing = [f for f in REQUIRED_FIELDS if f not in record]
    if missing:
        raise ParseError(line, f"missing fields: {', '.join(missing)}")
    for name in REQUIRED_FIELDS:
        if not isinstance(record[name], str):
            raise ParseError(line, f"field {name!r} must be a string")
    if not record["id"]:
        raise ParseError(line, "empty id")
    if not record["answer"].strip():
        raise ParseError(line, "empty answer")
    try:
        answer_type = AnswerType(record["answer_type"])
    except ValueError:
        raise ParseError(line, f"unknown answer_type {record['answer_type']!r}") from None
    try:
        task_type = TaskType(record["task_type"])
    except ValueError:
        raise ParseError(line, f"unknown task_type {record['task_type']!r}") from None
    return Sample(
        id=record["id"],
        image_ref=record["image"],
        question=record["question"],
        ground_truth=record["answer"],
        answer_type=answer_type,
        task_type=task_type,
        record=record,
    )


def load_manifest(path: Path | str, root: Path | str | None = None) -> DatasetManifest:
    """Parse a JSONL manifest. Rejects malformed lines and duplicate ids.

    `root` defaults to the manifest's own directory and is the base for
    image_ref resolution. Image existence is NOT checked here.
    """
    path = Path(path)
    if root is None:
        root = path.parent
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
            sample = parse_sample(record, lineno)
            if sample.id in seen:
                raise DuplicateId(sample.id, seen[sample.id], lineno)
            seen[sample.id] = lineno
            samples.append(sample)
    return DatasetManifest(samples=samples, root=Path(root))


def dump_manifest(manifest: DatasetManifest) -> str:
    """Serialize back to JSONL, preserving field order and unknown fields."""
    return "".join(json.dumps(s.record, ensure_ascii=False, separators=(", ", ": ")) + "\n" for s in manifest.samples)


def validate_images(manifest: DatasetManifest) -> list[MissingImage]:
    """Eagerly check that every image resolves and decodes. Bulk report."""
    from . import perturb  # local import: PIL only needed here and in perturb

    issues: list[MissingImage] = []
    for sample in manifest.samples:
        path = sample.image_path(manifest.root)
        if not path.is_file():
            issues.append(MissingImage(sample.id, path))
            continue
        try:
            img = perturb.load_image(path.read_bytes())
        except perturb.DecodeError as exc:
            issues.append(MissingImage(sample.id, path, f"undecodable: {exc}"))
            continue
        if img.width < 1 or img.height < 1:
            issues.append(MissingImage(sample.id, path, "degenerate size"))
    return issues


def write_records(path: Path | str, samples: Iterable[Sample]) -> None:
    """Write samples as a sub-manifest (full records, canonical JSON)."""
    from .util import atomic_write_text

    atomic_write_text(path, "".join(json_line(s.record) + "\n" for s in samples))
