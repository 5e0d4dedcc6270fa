"""Pluggable vision-language prediction backends.

Three kinds share one interface (predict / predict_with_trace):

* http — a live chat-completions-compatible service; the question goes as
  text and the image as base64 in the message content array. Responses are
  cached on disk keyed by (backend id, image bytes, question, decode mode),
  so identical payloads hit upstream exactly once.
* replay — serves predictions from a previous run's cache and attention
  traces from exporter files; never touches the network.
* stub — a deterministic synthetic model for tests: per-sample rules say up
  to which masked fraction the answer stays correct and what constant
  attention balance its traces carry.

Wire protocols carry no attention, so predict_with_trace on the http kind
always fails; attention scoring on real models replays exporter trace files.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cmab, perturb
from .types import ConfigError, PipelineError
from .util import atomic_write_text, json_line, stable_hash_hex

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 1024


class BackendError(PipelineError):
    """A trial-level failure; after retry exhaustion the trial is Failed."""


class Timeout(BackendError):
    pass


class ConnectionFailed(BackendError):
    pass


class HttpStatusError(BackendError):
    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"HTTP status {code}{': ' + detail if detail else ''}")
        self.code = code


class MalformedResponse(BackendError):
    pass


class ReplayMiss(BackendError):
    pass


class StubRuleMissing(BackendError):
    pass


class TraceUnavailable(BackendError):
    pass


class TraceMismatch(BackendError):
    pass


@dataclass(frozen=True)
class DecodeMode:
    mode: str = "greedy"  # greedy | sampled
    temperature: float | None = None

    def key(self) -> str:
        if self.mode == "greedy":
            return "greedy"
        return f"sampled:{self.temperature!r}"

    def to_dict(self) -> dict:
        if self.mode == "greedy":
            return {"mode": "greedy"}
        return {"mode": "sampled", "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeMode":
        mode = d.get("mode", "greedy")
        if mode not in ("greedy", "sampled"):
            raise ConfigError(f"unknown decode mode {mode!r}")
        return cls(mode=mode, temperature=d.get("temperature"))


GREEDY = DecodeMode()


@dataclass(frozen=True)
class PredictRequest:
    sample_id: str
    image_bytes: bytes
    question: str


@dataclass
class BackendResponse:
    answer_text: str
    generated_token_count: int
    latency_s: float
    backend_id: str


@dataclass
class BackendConfig:
    kind: str  # http | replay | stub
    endpoint: str | None = None
    auth_env: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    decode: DecodeMode = GREEDY
    model: str | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    cache_dir: str | None = None
    trace_dir: str | None = None
    stub_rules: str | None = None
    backend_id: str | None = None
    retry_base_s: float = 0.5

    def validate(self) -> None:
        if self.kind not in ("http", "replay", "stub"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigError("http backend requires an endpoint")
        if self.kind == "stub" and not self.stub_rules:
            raise ConfigError("stub backend requires a stub_rules file")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "endpoint": self.endpoint,
            "auth_env": self.auth_env,
            "timeout_s": self.timeout_s,
            "max_retries": self.max_retries,
            "decode": self.decode.to_dict(),
            "model": self.model,
            "max_tokens": self.max_tokens,
            "cache_dir": self.cache_dir,
            "trace_dir": self.trace_dir,
            "stub_rules": self.stub_rules,
            "backend_id": self.backend_id,
            "retry_base_s": self.retry_base_s,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = dict(d)
        decode = DecodeMode.from_dict(known.pop("decode", {}))
        try:
            cfg = cls(decode=decode, **known)
        except TypeError as exc:
            raise ConfigError(f"bad backend config: {exc}") from None
        cfg.validate()
        return cfg


@dataclass
class BackendStats:
    upstream_requests: int = 0
    retries: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + by)


class ResponseCache:
    """On-disk response cache with atomic write-then-rename entries."""

    MARKER = "backend.json"

    def __init__(self, directory: Path | str):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(backend_id: str, image_bytes: bytes, question: str, decode_key: str) -> str:
        return stable_hash_hex(backend_id, image_bytes, question, decode_key)

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, key: str, entry: dict) -> None:
        atomic_write_text(self._path(key), json_line(entry) + "\n")

    def write_marker(self, backend_id: str) -> None:
        marker = self.dir / self.MARKER
        if not marker.exists():
            atomic_write_text(marker, json_line({"backend_id": backend_id}) + "\n")

    def read_marker(self) -> str | None:
        marker = self.dir / self.MARKER
        if not marker.is_file():
            return None
        return json.loads(marker.read_text(encoding="utf-8")).get("backend_id")


@dataclass
class StubRule:
    """Deterministic behaviour of the stub model for one sample.

    correct_up_to: largest masking ratio (inclusive, on the grid) at which
    the stub still answers correctly; None means wrong even unmasked.
    rho: constant per-cell attention balance carried by emitted traces.
    """

    answer: str
    wrong_answer: str = "i do not know"
    correct_up_to: float | None = 0.9
    rho: float = 1.0
    trace_layers: int = 4
    trace_tokens: int = 5
    img_tokens: int = 16
    txt_tokens: int = 8

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "wrong_answer": self.wrong_answer,
            "correct_up_to": self.correct_up_to,
            "rho": self.rho,
            "trace_layers": self.trace_layers,
            "trace_tokens": self.trace_tokens,
            "img_tokens": self.img_tokens,
            "txt_tokens": self.txt_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StubRule":
        return cls(**d)


class StubBackend:
    """Synthetic model: reads the mask straight off the image.

    The stub counts pixels whose channels all equal the fill value and
    answers correctly iff that count does not exceed the count a mask at
    rule.correct_up_to would produce. On images that contain no natural
    fill-colored pixels this reproduces an exact accuracy step function of
    the masking ratio.
    """

    kind = "stub"

    def __init__(self, rules: dict[str, StubRule], fill: int = 0, backend_id: str = "stub"):
        self.rules = rules
        self.fill = fill
        self.backend_id = backend_id
        self.stats = BackendStats()

    @classmethod
    def from_file(cls, path: Path | str) -> "StubBackend":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = {sid: StubRule.from_dict(rd) for sid, rd in doc["rules"].items()}
        return cls(rules, fill=doc.get("fill", 0))

    def save(self, path: Path | str) -> None:
        doc = {"fill": self.fill, "rules": {sid: r.to_dict() for sid, r in self.rules.items()}}
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def _rule(self, sample_id: str) -> StubRule:
        try:
            return self.rules[sample_id]
        except KeyError:
            raise StubRuleMissing(f"no stub rule for sample {sample_id!r}") from None

    def _masked_fraction_count(self, image_bytes: bytes) -> tuple[int, int, int]:
        img = perturb.load_image(image_bytes)
        arr = np.array(img)
        if arr.ndim == 2:
            filled = int((arr == self.fill).sum())
        else:
            filled = int(np.all(arr == self.fill, axis=-1).sum())
        return filled, img.width, img.height

    def predict(self, request: PredictRequest) -> BackendResponse:
        self.stats.bump("upstream_requests")
        rule = self._rule(request.sample_id)
        filled, width, height = self._masked_fraction_count(request.image_bytes)
        correct = rule.correct_up_to is not None and filled <= perturb.mask_count(
            width, height, rule.correct_up_to
        )
        answer = rule.answer if correct else rule.wrong_answer
        return BackendResponse(answer, rule.trace_tokens, 0.0, self.backend_id)

    def predict_with_trace(self, request: PredictRequest) -> tuple[BackendResponse, cmab.AttentionTrace]:
        response = self.predict(request)
        rule = self._rule(request.sample_id)
        t, layers = rule.trace_tokens, rule.trace_layers
        # Cells normalized so s_img + s_txt == 1 and s_img/s_txt == rho.
        s_img = np.full((t, layers), rule.rho / (1.0 + rule.rho))
        s_txt = np.full((t, layers), 1.0 / (1.0 + rule.rho))
        trace = cmab.AttentionTrace(
            sample_id=request.sample_id,
            layer_count=layers,
            img_token_count=rule.img_tokens,
            txt_token_count=rule.txt_tokens,
            generated_count=t,
            s_img=s_img,
            s_txt=s_txt,
            model="stub",
        )
        return response, trace


class ReplayBackend:
    """Serves recorded responses and exporter trace files; zero network I/O."""

    kind = "replay"

    def __init__(
        self,
        cache_dir: Path | str | None = None,
        trace_dir: Path | str | None = None,
        backend_id: str | None = None,
        decode: DecodeMode = GREEDY,
    ):
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.trace_dir = Path(trace_dir) if trace_dir else None
        if backend_id is None and self.cache is not None:
            backend_id = self.cache.read_marker()
        self.backend_id = backend_id or "replay"
        self.decode = decode
        self.stats = BackendStats()
        self._answers: dict[str, dict] | None = None
        self._lock = threading.Lock()

    def _answer_table(self) -> dict[str, dict]:
        with self._lock:
            if self._answers is None:
                self._answers = {}
                if self.trace_dir is not None:
                    answers_path = self.trace_dir / "answers.jsonl"
                    if answers_path.is_file():
                        with open(answers_path, encoding="utf-8") as fh:
                            for line in fh:
                                if line.strip():
                                    rec = json.loads(line)
                                    self._answers[rec["id"]] = rec
            return self._answers

    def predict(self, request: PredictRequest) -> BackendResponse:
        if self.cache is None:
            raise ReplayMiss("replay backend has no recorded responses")
        key = ResponseCache.key(self.backend_id, request.image_bytes, request.question, self.decode.key())
        entry = self.cache.get(key)
        if entry is None:
            raise ReplayMiss(f"no recorded response for sample {request.sample_id!r}")
        self.stats.bump("cache_hits")
        return BackendResponse(
            entry["answer_text"], entry.get("generated_token_count", 0), 0.0, self.backend_id
        )

    def predict_with_trace(self, request: PredictRequest) -> tuple[BackendResponse, cmab.AttentionTrace]:
        if self.trace_dir is None:
            raise TraceUnavailable("replay backend has no trace directory")
        trace_path = self.trace_dir / f"{request.sample_id}.trace"
        if not trace_path.is_file():
            raise TraceUnavailable(f"no trace file for sample {request.sample_id!r}")
        trace = cmab.parse_trace(trace_path)
        answer = self._answer_table().get(request.sample_id)
        if answer is None:
            raise TraceUnavailable(f"no recorded answer for sample {request.sample_id!r}")
        tokens = answer.get("token_count", trace.generated_count)
        if tokens != trace.generated_count:
            raise TraceMismatch(
                f"sample {request.sample_id!r}: trace has {trace.generated_count} tokens, answer reports {tokens}"
            )
        response = BackendResponse(answer["answer"], tokens, 0.0, self.backend_id)
        return response, trace


class HttpBackend:
    """Chat-completions-compatible client with retries, backoff, and cache."""

    kind = "http"

    RETRYABLE = (Timeout, ConnectionFailed, HttpStatusError, MalformedResponse)

    def __init__(self, config: BackendConfig):
        config.validate()
        self.config = config
        self.backend_id = config.backend_id or f"http:{config.endpoint}:{config.model or ''}"
        self.cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        if self.cache is not None:
            self.cache.write_marker(self.backend_id)
        self.stats = BackendStats()
        self._local = threading.local()

    def _session(self):
        import requests

        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env)
            if not token:
                raise ConfigError(f"auth environment variable {self.config.auth_env!r} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _payload(self, request: PredictRequest) -> dict:
        image_b64 = base64.b64encode(request.image_bytes).decode("ascii")
        temperature = 0.0 if self.config.decode.mode == "greedy" else self.config.decode.temperature
        return {
            "model": self.config.model or "default",
            "temperature": temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.question},
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image_b64}"}},
                    ],
                }
            ],
        }

    def _request_once(self, payload: dict) -> tuple[str, int]:
        import requests

        self.stats.bump("upstream_requests")
        try:
            resp = self._session().post(
                self.config.endpoint,
                json=payload,
                timeout=self.config.timeout_s,
                headers=self._headers(),
            )
        except requests.exceptions.Timeout:
            raise Timeout(f"no response within {self.config.timeout_s}s") from None
        except requests.exceptions.RequestException as exc:
            raise ConnectionFailed(str(exc)) from None
        if resp.status_code != 200:
            raise HttpStatusError(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise MalformedResponse(f"unparseable response body: {resp.text[:200]!r}") from None
        if not isinstance(content, str):
            raise MalformedResponse("message content is not a string")
        tokens = 0
        usage = body.get("usage")
        if isinstance(usage, dict):
            tokens = int(usage.get("completion_tokens", 0) or 0)
        return content, tokens

    def predict(self, request: PredictRequest) -> BackendResponse:
        key = None
        if self.cache is not None:
            key = ResponseCache.key(self.backend_id, request.image_bytes, request.question, self.config.decode.key())
            entry = self.cache.get(key)
            if entry is not None:
                self.stats.bump("cache_hits")
                return BackendResponse(
                    entry["answer_text"], entry.get("generated_token_count", 0), 0.0, self.backend_id
                )
        payload = self._payload(request)
        started = time.monotonic()
        attempt = 0
        while True:
            try:
                answer, tokens = self._request_once(payload)
                break
            except self.RETRYABLE as exc:
                if attempt >= self.config.max_retries:
                    raise
                delay = self.config.retry_base_s * (2**attempt) * (0.5 + random.random() / 2)
                log.warning(
                    "sample %s: %s; retry %d/%d in %.2fs",
                    request.sample_id, exc, attempt + 1, self.config.max_retries, delay,
                )
                time.sleep(delay)
                attempt += 1
                self.stats.bump("retries")
        latency = time.monotonic() - started
        if self.cache is not None and key is not None:
            self.cache.put(key, {"answer_text": answer, "generated_token_count": tokens, "backend_id": self.backend_id})
        return BackendResponse(answer, tokens, latency, self.backend_id)

    def predict_with_trace(self, request: PredictRequest):
        raise TraceUnavailable("chat-completions wire protocols carry no attention weights")


Backend = StubBackend | ReplayBackend | HttpBackend


def create_backend(config: BackendConfig) -> Backend:
    config.validate()
    if config.kind == "stub":
        backend = StubBackend.from_file(config.stub_rules)
        if config.backend_id:
            backend.backend_id = config.backend_id
        return backend
    if config.kind == "replay":
        return ReplayBackend(
            cache_dir=config.cache_dir,
            trace_dir=config.trace_dir,
            backend_id=config.backend_id,
            decode=config.decode,
        )
    return HttpBackend(config)
