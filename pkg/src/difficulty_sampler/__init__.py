"""Difficulty scoring and stratification for image-question datasets.

Two complementary per-sample difficulty metrics against a vision-language
backend — masking sensitivity (how quickly accuracy collapses as image
pixels are occluded) and attention balance (how evenly generation attends
to image vs text tokens) — plus stratification into easy/medium/hard/
unsolved subsets and training-plan manifests for downstream RL-only and
SFT+RL runs.
"""

from .types import AnswerType, DifficultyResult, Label, Method, TaskType

__version__ = "0.1.0"

__all__ = [
    "AnswerType",
    "DifficultyResult",
    "Label",
    "Method",
    "TaskType",
    "__version__",
]
