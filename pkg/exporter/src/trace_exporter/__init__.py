"""Export per-token, per-layer modality attention traces from VLM generation."""

__version__ = "0.1.0"
