"""Shared fixtures: synthetic datasets and a scripted chat-completions server."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from difficulty_sampler import synthetic
from difficulty_sampler.backend import BackendConfig
from difficulty_sampler.orchestrate import RunConfig


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 40-sample synthetic dataset with known target labels."""
    root = tmp_path_factory.mktemp("synth")
    return synthetic.build_synthetic_dataset(root, count=40, seed=3)


def make_stub_config(dataset, out, method="both", seed=7, concurrency=4, **overrides) -> RunConfig:
    config = RunConfig(
        manifest=str(dataset.manifest_path),
        backend=BackendConfig(kind="stub", stub_rules=str(dataset.rules_path)),
        method=method,
        seed=seed,
        concurrency=concurrency,
        out=str(out),
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


class MockChatServer:
    """Scripted chat-completions endpoint for client tests.

    `script` is a list of (status, body) responses consumed in order; when
    exhausted (or not given), `answer_fn(payload)` produces the reply text.
    """

    def __init__(self, script=None, answer_fn=None, delay=0.0):
        self.script = list(script or [])
        self.answer_fn = answer_fn or (lambda payload: "ok")
        self.delay = delay
        self.request_count = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                with outer._lock:
                    outer.request_count += 1
                    scripted = outer.script.pop(0) if outer.script else None
                if outer.delay:
                    time.sleep(outer.delay)
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                if scripted is not None:
                    status, body = scripted
                else:
                    status, body = 200, None
                if body is None:
                    answer = outer.answer_fn(payload)
                    body = {
                        "choices": [{"message": {"content": answer}}],
                        "usage": {"completion_tokens": 3},
                    }
                raw = body.encode() if isinstance(body, str) else json.dumps(body).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(raw)))
                    self.end_headers()
                    self.wfile.write(raw)
                except BrokenPipeError:
                    pass  # client gave up (timeout tests)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_server_factory():
    servers = []

    def factory(**kwargs):
        server = MockChatServer(**kwargs)
        server.__enter__()
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.__exit__()
