"""Attention-balance difficulty scoring from generation traces.

A trace records, for every generated token t and transformer layer l, the
total attention mass the model put on image-token prompt positions (s_img)
and on text-token prompt positions (s_txt). The per-token balance is the
geometric mean over middle layers (first and last excluded) of
s_img / (s_txt + eps), stabilized with eps inside the log; the per-sample
balance rho_bar is the arithmetic mean over generated tokens. Balanced
attention (rho_bar in the moderate band) marks a hard sample; strongly
one-sided attention marks an easy one; incorrect answers are unsolved
regardless of attention.

Trace file format (shared, bit-exact contract with the trace exporter):

    CMAB1 sample_id=<id> layers=<L> img=<Limg> txt=<Ltxt> gen=<T> model=<name>
    t=<t> l=<l> s_img=<decimal> s_txt=<decimal>
    ... (T*L cell lines, any order, each exactly once)

UTF-8, decimals with >= 9 significant figures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from .types import Label, PipelineError

EPSILON = 1e-8

# Band edges (lo_easy, lo_hard, hi_hard, hi_easy): easy below/above the outer
# pair, hard inside the inner closed interval, medium in between.
DEFAULT_BANDS: tuple[float, float, float, float] = (0.1, 0.4, 1.6, 1.9)

TRACE_MAGIC = "CMAB1"
_HEADER_KEYS = ("sample_id", "layers", "img", "txt", "gen")


class TraceError(PipelineError):
    pass


class BadHeader(TraceError):
    pass


class BadCellLine(TraceError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class MissingCell(TraceError):
    def __init__(self, t: int, l: int):
        super().__init__(f"missing cell t={t} l={l}")
        self.t, self.l = t, l


class DuplicateCell(TraceError):
    def __init__(self, t: int, l: int):
        super().__init__(f"duplicate cell t={t} l={l}")
        self.t, self.l = t, l


class NonFinite(TraceError):
    def __init__(self, t: int, l: int):
        super().__init__(f"cell t={t} l={l} is not a finite non-negative value")
        self.t, self.l = t, l


class LayerCountTooSmall(TraceError):
    pass


class EmptyGeneration(TraceError):
    pass


@dataclass
class AttentionTrace:
    """Per-token, per-layer modality attention sums for one sample."""

    sample_id: str
    layer_count: int
    img_token_count: int
    txt_token_count: int
    generated_count: int
    s_img: np.ndarray  # shape (T, L)
    s_txt: np.ndarray  # shape (T, L)
    model: str = ""


@dataclass
class CmabResult:
    sample_id: str
    rho_bar: float | None
    per_token_rho: list[float] = field(default_factory=list)
    correct: bool = False
    label: Label = Label.UNSCORED
    answer_text: str = ""


def _parse_kv(token: str, line: int) -> tuple[str, str]:
    key, sep, value = token.partition("=")
    if not sep or not key:
        raise BadCellLine(line, f"malformed token {token!r}")
    return key, value


def parse_trace(source: Path | str | IO[str]) -> AttentionTrace:
    """Single-pass streaming parse of a trace file.

    Every declared cell must appear exactly once; values must be finite and
    non-negative. Cell lines may appear in any order.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return parse_trace(fh)

    header = source.readline()
    tokens = header.split()
    if not tokens or tokens[0] != TRACE_MAGIC:
        raise BadHeader(f"expected {TRACE_MAGIC} header, got {header[:40]!r}")
    fields: dict[str, str] = {}
    for token in tokens[1:]:
        key, _, value = token.partition("=")
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise BadHeader(f"header missing fields: {', '.join(missing)}")
    try:
        layers = int(fields["layers"])
        img = int(fields["img"])
        txt = int(fields["txt"])
        gen = int(fields["gen"])
    except ValueError:
        raise BadHeader("non-integer dimension in header") from None
    if layers < 1 or img < 0 or txt < 0 or gen < 0:
        raise BadHeader("dimensions out of range")

    s_img = np.zeros((gen, layers))
    s_txt = np.zeros((gen, layers))
    seen = np.zeros((gen, layers), dtype=bool)
    for lineno, line in enumerate(source, start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise BadCellLine(lineno, f"expected 4 tokens, got {len(parts)}")
        kv = dict(_parse_kv(p, lineno) for p in parts)
        if set(kv) != {"t", "l", "s_img", "s_txt"}:
            raise BadCellLine(lineno, f"unexpected keys {sorted(kv)}")
        try:
            t = int(kv["t"])
            l = int(kv["l"])
            img_val = float(kv["s_img"])
            txt_val = float(kv["s_txt"])
        except ValueError:
            raise BadCellLine(lineno, "non-numeric cell value") from None
        if not (1 <= t <= gen and 1 <= l <= layers):
            raise BadCellLine(lineno, f"cell index out of range: t={t} l={l}")
        if seen[t - 1, l - 1]:
            raise DuplicateCell(t, l)
        if not (math.isfinite(img_val) and math.isfinite(txt_val) and img_val >= 0 and txt_val >= 0):
            raise NonFinite(t, l)
        seen[t - 1, l - 1] = True
        s_img[t - 1, l - 1] = img_val
        s_txt[t - 1, l - 1] = txt_val

    if not seen.all():
        t_idx, l_idx = np.argwhere(~seen)[0]
        raise MissingCell(int(t_idx) + 1, int(l_idx) + 1)
    return AttentionTrace(
        sample_id=fields["sample_id"],
        layer_count=layers,
        img_token_count=img,
        txt_token_count=txt,
        generated_count=gen,
        s_img=s_img,
        s_txt=s_txt,
        model=fields.get("model", ""),
    )


def format_trace(trace: AttentionTrace) -> str:
    """Canonical serialization (t-major cell order, 10-digit mantissas)."""
    lines = [
        f"{TRACE_MAGIC} sample_id={trace.sample_id} layers={trace.layer_count} "
        f"img={trace.img_token_count} txt={trace.txt_token_count} "
        f"gen={trace.generated_count} model={trace.model or 'unknown'}"
    ]
    for t in range(trace.generated_count):
        for l in range(trace.layer_count):
            lines.append(
                f"t={t + 1} l={l + 1} s_img={trace.s_img[t, l]:.10e} s_txt={trace.s_txt[t, l]:.10e}"
            )
    return "\n".join(lines) + "\n"


def write_trace(trace: AttentionTrace, path: Path | str) -> None:
    Path(path).write_text(format_trace(trace), encoding="utf-8")


def token_ratio(trace: AttentionTrace, t: int, epsilon: float = EPSILON) -> float:
    """Middle-layer geometric mean of the image/text attention ratio.

    t is 1-indexed. The first and last layers are excluded; epsilon
    stabilizes both the ratio denominator and the log argument, so the
    result is always finite and positive.
    """
    if trace.layer_count < 3:
        raise LayerCountTooSmall(f"need >= 3 layers, trace has {trace.layer_count}")
    if not 1 <= t <= trace.generated_count:
        raise ValueError(f"token index {t} out of range 1..{trace.generated_count}")
    mid_img = trace.s_img[t - 1, 1:-1]
    mid_txt = trace.s_txt[t - 1, 1:-1]
    ratios = mid_img / (mid_txt + epsilon)
    return float(np.exp(np.mean(np.log(ratios + epsilon))))


def sample_balance(trace: AttentionTrace, epsilon: float = EPSILON) -> float:
    """Arithmetic mean of token_ratio over all generated tokens."""
    if trace.generated_count == 0:
        raise EmptyGeneration(f"trace {trace.sample_id!r} has no generated tokens")
    total = 0.0
    for t in range(1, trace.generated_count + 1):
        total += token_ratio(trace, t, epsilon)
    return total / trace.generated_count


def classify_cmab(
    rho_bar: float,
    correct: bool,
    bands: tuple[float, float, float, float] = DEFAULT_BANDS,
) -> Label:
    """Difficulty label from the balance value and answer correctness.

    Incorrect answers are unsolved regardless of attention. Otherwise:
    easy outside (lo_easy, hi_easy], medium in [lo_easy, lo_hard) or
    (hi_hard, hi_easy], hard in the closed [lo_hard, hi_hard].
    """
    if rho_bar < 0:
        raise ValueError("rho_bar must be non-negative")
    lo_easy, lo_hard, hi_hard, hi_easy = bands
    if not correct:
        return Label.UNSOLVED
    if rho_bar < lo_easy or rho_bar > hi_easy:
        return Label.EASY
    if rho_bar < lo_hard or rho_bar > hi_hard:
        return Label.MEDIUM
    return Label.HARD


def result_from_trace(
    trace: AttentionTrace,
    correct: bool,
    answer_text: str,
    epsilon: float = EPSILON,
    bands: tuple[float, float, float, float] = DEFAULT_BANDS,
) -> CmabResult:
    """Score one parsed trace; degenerate traces yield an unscored result."""
    try:
        per_token = [token_ratio(trace, t, epsilon) for t in range(1, trace.generated_count + 1)]
        if not per_token:
            raise EmptyGeneration(trace.sample_id)
    except (LayerCountTooSmall, EmptyGeneration):
        return CmabResult(sample_id=trace.sample_id, rho_bar=None, correct=correct, label=Label.UNSCORED, answer_text=answer_text)
    rho_bar = sum(per_token) / len(per_token)
    return CmabResult(
        sample_id=trace.sample_id,
        rho_bar=rho_bar,
        per_token_rho=per_token,
        correct=correct,
        label=classify_cmab(rho_bar, correct, bands),
        answer_text=answer_text,
    )
