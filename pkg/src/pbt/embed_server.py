"""Stub embedding service speaking the ``POST /embed`` wire protocol.

Row k of the returned token matrix is ``embed_hash`` of the first k+1 prompt
tokens, so the last valid row equals ``embed_hash`` of the whole prompt.
Rows are padded with zero, mask-0 rows up to a multiple of ``pad_to``.
"""
from __future__ import annotations

import contextlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .aging import embed_hash, tokenize


def token_matrix(prompt: str, d_embed: int, pad_to: int = 8):
    tokens = tokenize(prompt)
    rows = [embed_hash(" ".join(tokens[: k + 1]), d_embed).tolist() for k in range(len(tokens))]
    mask = [1] * len(rows)
    while pad_to > 1 and len(rows) % pad_to:
        rows.append([0.0] * d_embed)
        mask.append(0)
    return {"dim": d_embed, "tokens": rows, "mask": mask}


class _Handler(BaseHTTPRequestHandler):
    server_version = "pbt-embed-stub/1"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _reply(self, status, body):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        if self.path.rstrip("/") != "/embed":
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            req = json.loads(self.rfile.read(length).decode("utf-8"))
            prompt = req["prompt"]
            if not isinstance(prompt, str) or not tokenize(prompt):
                raise ValueError("prompt must be a non-empty string")
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            self._reply(400, {"error": str(exc)})
            return
        fixed = self.server.fixed_response
        if fixed is not None:
            self._reply(200, fixed)
        else:
            self._reply(200, token_matrix(prompt, self.server.d_embed, self.server.pad_to))


class StubServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, host="127.0.0.1", port=0, d_embed=256, fixed_response=None, pad_to=8):
        super().__init__((host, port), _Handler)
        self.d_embed = d_embed
        self.fixed_response = fixed_response
        self.pad_to = pad_to

    @property
    def url(self):
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


@contextlib.contextmanager
def running_stub(**kwargs):
    """Run a stub server on a background thread; yields its base URL."""
    srv = StubServer(**kwargs)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        yield srv.url
    finally:
        srv.shutdown()
        srv.server_close()
        t.join(timeout=5)
