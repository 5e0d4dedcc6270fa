"""Synthetic datasets with known difficulty labels, for tests and demos.

Builds small noise images (no pixel ever equals the mask fill value, so the
stub backend can read masked fractions exactly), a manifest, and a stub
rule table whose step thresholds and attention balances are constructed to
hit chosen labels:

* correct_up_to = c makes the answer flip wrong at grid ratio c + 0.1, so
  the critical ratio is c + 0.1 (or undefined for c = 0.9, or unsolved for
  c = None);
* rho pins the attention balance, and correctness on the unmasked image
  follows from c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backend import StubBackend, StubRule
from .manifest import DatasetManifest, parse_sample
from .types import DifficultyResult, Label, Method
from .util import json_line

# (pism label, correct_up_to, cmab label, rho) cycled over the dataset.
TARGET_TABLE: tuple[tuple[str, float | None, str, float], ...] = (
    ("hard", 0.0, "hard", 1.0),
    ("hard", 0.3, "medium", 0.2),
    ("medium", 0.4, "easy", 0.05),
    ("medium", 0.5, "hard", 0.7),
    ("easy", 0.6, "medium", 1.7),
    ("easy", 0.9, "easy", 2.5),
    ("unsolved", None, "unsolved", 1.0),
    ("hard", 0.2, "easy", 2.1),
    ("medium", 0.4, "medium", 0.3),
    ("easy", 0.7, "hard", 1.5),
)

_ANSWERS = (
    ("multiple_choice", "B", "A"),
    ("numeric", "42", "7"),
    ("open_text", "blue circle", "red square"),
)


@dataclass
class SyntheticDataset:
    root: Path
    manifest_path: Path
    rules_path: Path
    expected: dict[str, dict[str, str]]  # id -> {"pism": label, "cmab": label}

    def expected_for(self, method: str) -> dict[str, str]:
        return {sid: labels[method] for sid, labels in self.expected.items()}


def _noise_image(rng: np.random.Generator, size: tuple[int, int], fill: int) -> Image.Image:
    """RGB noise guaranteed to contain no fill-colored pixel."""
    w, h = size
    lo = fill + 1 if fill < 128 else 0
    hi = 256 if fill < 128 else fill
    arr = rng.integers(lo, hi, size=(h, w, 3), dtype=np.int64).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def build_synthetic_dataset(
    root: Path | str,
    count: int = 200,
    seed: int = 0,
    image_size: tuple[int, int] = (16, 16),
    fill: int = 0,
) -> SyntheticDataset:
    """Emit images/, manifest.jsonl, stub_rules.json, expected_labels.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))

    rules: dict[str, StubRule] = {}
    expected: dict[str, dict[str, str]] = {}
    lines = []
    for i in range(count):
        sample_id = f"s{i:04d}"
        pism_label, correct_up_to, cmab_label, rho = TARGET_TABLE[i % len(TARGET_TABLE)]
        answer_type, answer, wrong = _ANSWERS[i % len(_ANSWERS)]
        task_type = "perception" if i < count // 2 else "reasoning"

        image = _noise_image(rng, image_size, fill)
        image_ref = f"images/{sample_id}.png"
        image.save(root / image_ref)

        record = {
            "id": sample_id,
            "image": image_ref,
            "question": f"What does tile {sample_id} show?",
            "answer": answer,
            "answer_type": answer_type,
            "task_type": task_type,
            "origin": "synthetic",
        }
        lines.append(json_line(record))
        rules[sample_id] = StubRule(
            answer=answer,
            wrong_answer=wrong,
            correct_up_to=correct_up_to,
            rho=rho,
        )
        expected[sample_id] = {"pism": pism_label, "cmab": cmab_label}

    manifest_path = root / "manifest.jsonl"
    manifest_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    rules_path = root / "stub_rules.json"
    StubBackend(rules, fill=fill).save(rules_path)
    (root / "expected_labels.json").write_text(
        json.dumps(expected, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return SyntheticDataset(root=root, manifest_path=manifest_path, rules_path=rules_path, expected=expected)


# Per-label metric values used when fabricating label files from counts.
_FIXTURE_METRICS = {
    Method.PISM: {Label.EASY: 0.8, Label.MEDIUM: 0.5, Label.HARD: 0.2, Label.UNSOLVED: 0.0},
    Method.CMAB: {Label.EASY: 0.05, Label.MEDIUM: 0.2, Label.HARD: 1.0, Label.UNSOLVED: 1.0},
}


def build_label_fixture(
    counts: dict[Label, int],
    method: Method,
    task_type: str = "perception",
    id_prefix: str = "f",
) -> tuple[DatasetManifest, list[DifficultyResult]]:
    """In-memory manifest + results with exact per-stratum counts.

    Lets distribution accounting be exercised against externally reported
    totals without running any scoring.
    """
    samples = []
    results = []
    index = 0
    for label in (Label.EASY, Label.MEDIUM, Label.HARD, Label.UNSOLVED):
        metric = _FIXTURE_METRICS[method][label]
        for _ in range(counts.get(label, 0)):
            sample_id = f"{id_prefix}{index:06d}"
            record = {
                "id": sample_id,
                "image": f"images/{sample_id}.png",
                "question": f"fixture question {index}",
                "answer": "B",
                "answer_type": "multiple_choice",
                "task_type": task_type,
            }
            samples.append(parse_sample(record))
            results.append(DifficultyResult(sample_id, method, metric, label))
            index += 1
    manifest = DatasetManifest(samples=samples, root=Path("."))
    return manifest, results


def write_label_fixture(
    directory: Path | str,
    manifest: DatasetManifest,
    results: list[DifficultyResult],
    name: str = "fixture",
) -> tuple[Path, Path]:
    """Persist a fixture as (manifest.jsonl, labels.jsonl) files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / f"{name}.manifest.jsonl"
    labels_path = directory / f"{name}.labels.jsonl"
    manifest_path.write_text("".join(json_line(s.record) + "\n" for s in manifest), encoding="utf-8")
    labels_path.write_text("".join(json_line(r.to_record()) + "\n" for r in results), encoding="utf-8")
    return manifest_path, labels_path
