"""Shared test helpers: counting backends, stub HTTP servers, text corpora."""

from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from stagewise.backends import Generator, RewardScorer
from stagewise.stages import CANONICAL_ORDER, StageBlock, StagedResponse


class CountingGenerator(Generator):
    """Wraps a generator and counts every call; used to audit ledgers."""

    def __init__(self, inner: Generator):
        self.inner = inner
        self.calls = 0
        self.requests = []

    def generate(self, request):
        self.calls += 1
        self.requests.append(request)
        return self.inner.generate(request)


class CountingScorer(RewardScorer):
    def __init__(self, inner: RewardScorer):
        self.inner = inner
        self.calls = 0
        self.requests = []

    def score(self, request):
        self.calls += 1
        self.requests.append(request)
        return self.inner.score(request)


class ScriptedGenerator(Generator):
    """Returns canned replies in call order (repeating the last one)."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def generate(self, request):
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        if isinstance(reply, Exception):
            raise reply
        return reply


class ScriptedScorer(RewardScorer):
    def __init__(self, scores):
        self.scores = list(scores)
        self.calls = 0

    def score(self, request):
        value = self.scores[min(self.calls, len(self.scores) - 1)]
        self.calls += 1
        if isinstance(value, Exception):
            raise value
        return value


def random_staged_response(rng: random.Random) -> StagedResponse:
    """A valid response: a canonical prefix with tag-free trimmed inner text."""
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 .,:;!?()|%&'\"\n\t"
    count = rng.randint(0, 4)
    blocks = []
    for kind in CANONICAL_ORDER[:count]:
        length = rng.randint(0, 40)
        text = "".join(rng.choice(alphabet) for _ in range(length)).strip()
        # Inner '<' is legal as long as no full tag string appears.
        if rng.random() < 0.3:
            text = (text + " < not a tag >").strip()
        blocks.append(StageBlock(kind, text))
    return StagedResponse(tuple(blocks))


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "stub/1"

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        self.server.requests.append(
            {"path": self.path, "headers": dict(self.headers), "body": body}
        )
        script = self.server.script
        step = script[min(len(self.server.requests) - 1, len(script) - 1)]
        status, payload = step
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class StubServer:
    """Scripted HTTP endpoint: a list of (status, json_payload) replies."""

    def __init__(self, script):
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
        self.server.script = script
        self.server.requests = []
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1/endpoint"

    @property
    def requests(self):
        return self.server.requests

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def factory(script):
        server = StubServer(script)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()
