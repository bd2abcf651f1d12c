"""HTTP serving of a trained classifier.

A small threaded JSON-over-HTTP service: every request reads one immutable
model snapshot, and reload builds a fresh snapshot and swaps it in with a
single reference assignment, so concurrent requests see the old model or
the new one but never a mixture.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import models
from .errors import BindFailure, EmptyQuery, InvalidArgument, QuerycatError, VocabHashMismatch
from .fsio import read_bytes
from .nncore import Model, load_model
from .textprep import Vocabulary


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 lets the OS pick a free port
    max_query_bytes: int = 2048
    default_top_k: int = 3


@dataclass(frozen=True)
class ModelSnapshot:
    """One immutable serving state: model, vocabulary, version hash."""

    model: Model
    vocab: Vocabulary
    version: str


def _checkpoint_version(path: str | Path) -> str:
    return hashlib.sha256(read_bytes(path)).hexdigest()


def _load_snapshot(checkpoint_path: str | Path, vocab: Vocabulary) -> ModelSnapshot:
    model = load_model(checkpoint_path)
    if model.vocab_hash and model.vocab_hash != vocab.content_hash():
        raise VocabHashMismatch("checkpoint was trained with a different vocabulary")
    return ModelSnapshot(model=model, vocab=vocab, version=_checkpoint_version(checkpoint_path))


class PredictionService:
    """Owns the HTTP server and the current model snapshot."""

    def __init__(self, config: ServiceConfig, checkpoint_path: str | Path, vocab: Vocabulary):
        self.config = config
        self._vocab = vocab
        self._snapshot = _load_snapshot(checkpoint_path, vocab)
        self._reload_lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def snapshot(self) -> ModelSnapshot:
        return self._snapshot

    @property
    def port(self) -> int:
        if self._server is None:
            raise InvalidArgument("service is not running")
        return self._server.server_address[1]

    def reload(self, model_path: str | Path) -> str:
        """Load a new checkpoint and atomically swap it in.

        Any failure leaves the current snapshot serving. Reloads are
        serialized; the swap itself is one reference assignment, which
        in-flight requests either see or do not.
        """
        with self._reload_lock:
            snapshot = _load_snapshot(model_path, self._vocab)
            self._snapshot = snapshot
            return snapshot.version

    def start(self) -> None:
        if self._server is not None:
            raise InvalidArgument("service already started")
        try:
            server = _Server((self.config.host, self.config.port), _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.config.host}:{self.config.port}: {exc}") from exc
        server.service = self  # type: ignore[attr-defined]
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
        self._server = None
        self._thread = None

    def serve_forever(self) -> None:
        """Blocking variant used by the command line."""
        if self._server is None:
            self.start()
        assert self._thread is not None
        self._thread.join()


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    # accept-queue depth; the stdlib default of 5 drops connections under
    # bursts of concurrent clients
    request_queue_size = 128


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> PredictionService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        pass

    def _send(self, code: int, payload: dict, close: bool = False) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        if close:
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes | None:
        """Read the request body, or answer an error and return None."""
        raw_len = self.headers.get("Content-Length")
        try:
            length = int(raw_len) if raw_len is not None else 0
        except ValueError:
            self._send(400, {"error": "bad_request"}, close=True)
            return None
        if length < 0:
            self._send(400, {"error": "bad_request"}, close=True)
            return None
        if length > self.service.config.max_query_bytes + 4096:
            # refuse before reading an unbounded body
            self._send(413, {"error": "query_too_large"}, close=True)
            return None
        return self.rfile.read(length)

    def do_GET(self) -> None:
        if self.path == "/healthz":
            snap = self.service.snapshot
            self._send(200, {"status": "ok", "model_version": snap.version})
        elif self.path in ("/predict", "/reload"):
            self._send(405, {"error": "method_not_allowed"})
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self) -> None:
        if self.path == "/predict":
            self._predict()
        elif self.path == "/reload":
            self._reload()
        elif self.path == "/healthz":
            self._send(405, {"error": "method_not_allowed"})
        else:
            self._send(404, {"error": "not_found"})

    def _predict(self) -> None:
        body = self._read_body()
        if body is None:
            return
        try:
            payload = json.loads(body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "bad_request"})
            return
        if not isinstance(payload, dict) or not isinstance(payload.get("query"), str):
            self._send(400, {"error": "bad_request"})
            return
        query = payload["query"]
        top_k = payload.get("top_k", self.service.config.default_top_k)
        if isinstance(top_k, bool) or not isinstance(top_k, int) or top_k < 1:
            self._send(400, {"error": "bad_request"})
            return
        if len(query.encode("utf-8")) > self.service.config.max_query_bytes:
            self._send(413, {"error": "query_too_large"})
            return
        # One snapshot read per request: the whole response is a single version.
        snap = self.service.snapshot
        try:
            ranked = models.predict(snap.model, snap.vocab, query, top_k=top_k)
        except EmptyQuery:
            self._send(400, {"error": "empty_query"})
            return
        self._send(200, {
            "model_version": snap.version,
            "predictions": [
                {"category_id": cat, "probability": prob} for cat, prob in ranked
            ],
        })

    def _reload(self) -> None:
        body = self._read_body()
        if body is None:
            return
        try:
            payload = json.loads(body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "bad_request"})
            return
        if not isinstance(payload, dict) or not isinstance(payload.get("model_path"), str):
            self._send(400, {"error": "bad_request"})
            return
        try:
            version = self.service.reload(payload["model_path"])
        except (QuerycatError, OSError):
            self._send(409, {"error": "reload_failed"})
            return
        self._send(200, {"status": "ok", "model_version": version})
