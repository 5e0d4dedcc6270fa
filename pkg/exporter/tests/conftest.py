import json

import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def sample_manifest(tmp_path_factory):
    """Five image-question records with images on disk (full dataset schema)."""
    root = tmp_path_factory.mktemp("data")
    (root / "images").mkdir()
    rng = np.random.default_rng(42)
    lines = []
    for i in range(5):
        sample_id = f"e{i:03d}"
        arr = rng.integers(1, 255, size=(18 + i, 22, 3)).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / "images" / f"{sample_id}.png")
        lines.append(
            json.dumps(
                {
                    "id": sample_id,
                    "image": f"images/{sample_id}.png",
                    "question": f"What does picture {i} show?",
                    "answer": "a test pattern",
                    "answer_type": "open_text",
                    "task_type": "perception",
                }
            )
        )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
