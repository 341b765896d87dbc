"""Shared fixtures: the mock suite, a live served mock on loopback, and
a scriptable server for exercising the retry policy."""

from __future__ import annotations

import http.server
import json
import socket
import threading
import time

import pytest
import uvicorn

from editchain.backends.mock import MockBackendSuite
from editchain.backends.server import create_app


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="session")
def mock_suite() -> MockBackendSuite:
    return MockBackendSuite()


@pytest.fixture(scope="session")
def mock_server_url(mock_suite):
    """The full mock suite served over HTTP on loopback."""
    port = free_port()
    config = uvicorn.Config(
        create_app(mock_suite), host="127.0.0.1", port=port, log_level="warning"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("mock server failed to start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class ScriptedHandler(http.server.BaseHTTPRequestHandler):
    """Replays a queue of (status, body) responses and records requests."""

    script: list[tuple[int, dict]] = []
    requests: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        type(self).requests.append(
            {
                "path": self.path,
                "headers": dict(self.headers),
                "body": json.loads(raw) if raw else None,
            }
        )
        status, body = (
            self.script.pop(0) if self.script else (500, {"error": {"code": "Empty", "message": "script exhausted"}})
        )
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):  # keep test output clean
        pass


class ScriptedServer:
    def __init__(self, script: list[tuple[int, dict]]):
        handler = type(
            "Handler", (ScriptedHandler,), {"script": list(script), "requests": []}
        )
        self.handler = handler
        self.httpd = http.server.HTTPServer(("127.0.0.1", 0), handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def requests(self) -> list[dict]:
        return self.handler.requests

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)


@pytest.fixture
def scripted_server():
    servers = []

    def start(script: list[tuple[int, dict]]) -> ScriptedServer:
        server = ScriptedServer(script)
        server.__enter__()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.__exit__()
