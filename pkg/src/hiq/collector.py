"""Trace collector service.

Ingests tree batches and span records over HTTP/JSON, persists them to an
append-only JSONL log replayed at startup, reconstructs service trees on
query, and hosts the per-host config API that agents poll. Also serves the
operator console statically under /ui when a UI directory is configured.

Endpoints: POST /v1/trees, POST /v1/spans, GET /v1/trees,
GET /v1/traces/{trace_id}, GET/PUT /v1/config?host=H, GET /v1/healthz.
Everything binds to localhost by default; --bind widens it.
"""

from __future__ import annotations

import argparse
import json
import logging
import mimetypes
import os
import threading
import time
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .control import ControlBlock, block_to_dict, validate_block_dict
from .tree import (
    HiQTree,
    SpanRecord,
    WireDecodeError,
    overhead_percent_str,
    reconstruct_service_tree,
    service_node_to_wire,
    span_from_wire,
    span_to_wire,
    wire_to_tree,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT = 9119
MAX_LIST_LIMIT = 1000
LOG_FILENAME = "collector-log.jsonl"


class CollectorError(Exception):
    pass


class _HTTPError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class StoredTrace:
    """One ingested tree plus receipt metadata."""

    __slots__ = ("tree", "wire", "host", "received_at_us")

    def __init__(self, tree: HiQTree, wire: dict, host: str, received_at_us: int):
        self.tree = tree
        self.wire = wire
        self.host = host
        self.received_at_us = received_at_us

    def summary(self) -> dict:
        root = self.tree.root
        if self.tree.metric.kind == "latency" and root.span > 0:
            pct = overhead_percent_str(self.tree.overhead_us, root.span)
        else:
            pct = "n/a"
        return {
            "tree_id": self.tree.tree_id,
            "metric": self.tree.metric.name,
            "unit": self.tree.metric.unit,
            "host": self.host,
            "root_name": root.name,
            "root_span": root.span,
            "overhead_us": self.tree.overhead_us,
            "overhead_pct": pct,
            "created_at_us": self.tree.created_at_us,
            "received_at_us": self.received_at_us,
        }


class CollectorStore:
    """Thread-safe in-memory store backed by an append-only JSONL log."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._trees: dict[str, StoredTrace] = {}
        self._tree_order: list[str] = []
        self._spans: dict[str, list[SpanRecord]] = {}
        self._span_ids: dict[str, set[str]] = {}
        self._configs: dict[str, dict] = {}
        self.revision = 0
        self._log_path = os.path.join(data_dir, LOG_FILENAME)
        self._replay()
        self._log = open(self._log_path, "a", encoding="utf-8")

    def close(self) -> None:
        with self._lock:
            self._log.close()

    def _replay(self) -> None:
        if not os.path.exists(self._log_path):
            return
        replayed = 0
        with open(self._log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    event = json.loads(line)
                    self._apply(event)
                    replayed += 1
                except (json.JSONDecodeError, WireDecodeError, KeyError) as exc:
                    logger.warning("skipping unreplayable log line: %s", exc)
        logger.info("replayed %d events from %s", replayed, self._log_path)

    def _apply(self, event: dict) -> None:
        kind = event["kind"]
        if kind == "tree":
            tree = wire_to_tree(event["tree"])
            self._store_tree(tree, event["tree"], event["host"], event["received_at_us"])
        elif kind == "spans":
            for obj in event["spans"]:
                self._store_span(span_from_wire(obj))
        elif kind == "config":
            self._configs[event["host"]] = event["block"]
            self.revision = max(self.revision, int(event["revision"]))
        else:
            raise KeyError(f"unknown log event kind '{kind}'")

    def _append_log(self, event: dict) -> None:
        self._log.write(json.dumps(event) + "\n")
        self._log.flush()

    def _store_tree(self, tree: HiQTree, wire: dict, host: str, received_at_us: int) -> bool:
        if tree.tree_id in self._trees:
            return False
        self._trees[tree.tree_id] = StoredTrace(tree, wire, host, received_at_us)
        self._tree_order.append(tree.tree_id)
        return True

    def _store_span(self, span: SpanRecord) -> bool:
        ids = self._span_ids.setdefault(span.trace_id, set())
        if span.span_id in ids:
            return False
        ids.add(span.span_id)
        self._spans.setdefault(span.trace_id, []).append(span)
        return True

    # -- ingestion ---------------------------------------------------------

    def ingest_trees(self, batch: dict) -> dict:
        if not isinstance(batch, dict) or not isinstance(batch.get("trees"), list):
            raise _HTTPError(400, "batch must be an object with a 'trees' array")
        host = str(batch.get("host", ""))
        accepted = rejected = 0
        now = int(time.time() * 1e6)
        with self._lock:
            for obj in batch["trees"]:
                try:
                    tree = wire_to_tree(obj)
                except WireDecodeError as exc:
                    rejected += 1
                    logger.warning("rejected tree: %s", exc)
                    continue
                accepted += 1  # duplicates count as accepted, stored once
                if self._store_tree(tree, obj, host, now):
                    self._append_log(
                        {"kind": "tree", "tree": obj, "host": host, "received_at_us": now}
                    )
        return {"accepted": accepted, "rejected": rejected}

    def ingest_spans(self, payload) -> dict:
        if not isinstance(payload, list):
            raise _HTTPError(400, "span payload must be a JSON array")
        accepted = rejected = 0
        stored: list[dict] = []
        with self._lock:
            for obj in payload:
                try:
                    span = span_from_wire(obj)
                except WireDecodeError as exc:
                    rejected += 1
                    logger.warning("rejected span: %s", exc)
                    continue
                accepted += 1
                if self._store_span(span):
                    stored.append(obj)
            if stored:
                self._append_log({"kind": "spans", "spans": stored})
        return {"accepted": accepted, "rejected": rejected}

    # -- queries -----------------------------------------------------------

    def list_trees(self, host=None, metric=None, since_us=None, limit=100) -> list[dict]:
        if limit > MAX_LIST_LIMIT:
            raise _HTTPError(400, f"limit must be <= {MAX_LIST_LIMIT}")
        out: list[dict] = []
        with self._lock:
            for tree_id in reversed(self._tree_order):
                stored = self._trees[tree_id]
                if host is not None and stored.host != host:
                    continue
                if metric is not None and stored.tree.metric.name != metric:
                    continue
                if since_us is not None and stored.received_at_us < since_us:
                    continue
                out.append(stored.summary())
                if len(out) >= limit:
                    break
        return out

    def query_trace(self, trace_id: str) -> dict:
        with self._lock:
            spans = list(self._spans.get(trace_id, ()))
        if not spans:
            raise _HTTPError(404, f"unknown trace '{trace_id}'")
        roots = reconstruct_service_tree(spans)
        return {
            "trace_id": trace_id,
            "span_count": len(spans),
            "roots": [service_node_to_wire(r) for r in roots],
        }

    def tree_ids(self) -> list[str]:
        with self._lock:
            return list(self._tree_order)

    # -- config ------------------------------------------------------------

    def get_config(self, host: str) -> dict:
        with self._lock:
            block = self._configs.get(host)
            if block is None:
                block = block_to_dict(ControlBlock())
            return {"revision": self.revision, "block": block}

    def put_config(self, host: str, block) -> dict:
        problems = validate_block_dict(block)
        if problems:
            raise _HTTPError(400, "invalid control block: " + "; ".join(problems))
        with self._lock:
            self.revision += 1
            stored = dict(block)
            self._configs[host] = stored
            self._append_log(
                {"kind": "config", "host": host, "revision": self.revision, "block": stored}
            )
            return {"revision": self.revision}


class _Handler(BaseHTTPRequestHandler):
    # self.server is the ThreadingHTTPServer; CollectorServer hangs `store`
    # and `ui_dir` off it before starting.
    protocol_version = "HTTP/1.1"
    server_version = "hiq-collector"

    # -- plumbing ----------------------------------------------------------

    def log_message(self, fmt, *args):  # route handler noise to logging
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, obj, status: int = 200) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise _HTTPError(400, f"request body is not valid JSON: {exc}") from exc

    def _dispatch(self, method: str) -> None:
        parsed = urllib.parse.urlsplit(self.path)
        query = urllib.parse.parse_qs(parsed.query)
        try:
            self._route(method, parsed.path, query)
        except _HTTPError as exc:
            self._send_json({"error": str(exc)}, status=exc.status)
        except Exception:
            logger.exception("unhandled error on %s %s", method, self.path)
            self._send_json({"error": "internal error"}, status=500)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_PUT(self) -> None:
        self._dispatch("PUT")

    # -- routes ------------------------------------------------------------

    def _route(self, method: str, path: str, query: dict) -> None:
        store = self.server.store
        if method == "GET" and path == "/v1/healthz":
            self._send_json({"status": "ok"})
        elif method == "POST" and path == "/v1/trees":
            self._send_json(store.ingest_trees(self._read_json()))
        elif method == "POST" and path == "/v1/spans":
            self._send_json(store.ingest_spans(self._read_json()))
        elif method == "GET" and path == "/v1/trees":
            self._send_json(
                store.list_trees(
                    host=self._one(query, "host"),
                    metric=self._one(query, "metric"),
                    since_us=self._int(query, "since_us"),
                    limit=self._int(query, "limit") or 100,
                )
            )
        elif method == "GET" and path.startswith("/v1/traces/"):
            trace_id = urllib.parse.unquote(path[len("/v1/traces/"):])
            self._send_json(store.query_trace(trace_id))
        elif method == "GET" and path == "/v1/config":
            self._send_json(store.get_config(self._one(query, "host") or ""))
        elif method == "PUT" and path == "/v1/config":
            host = self._one(query, "host") or ""
            self._send_json(store.put_config(host, self._read_json()))
        elif method == "GET" and (path == "/ui" or path.startswith("/ui/")):
            self._serve_ui(path)
        else:
            self._send_json({"error": f"no route for {method} {path}"}, status=404)

    @staticmethod
    def _one(query: dict, name: str) -> str | None:
        values = query.get(name)
        return values[0] if values else None

    def _int(self, query: dict, name: str) -> int | None:
        value = self._one(query, name)
        if value is None:
            return None
        try:
            return int(value)
        except ValueError:
            raise _HTTPError(400, f"query parameter '{name}' must be an integer") from None

    def _serve_ui(self, path: str) -> None:
        ui_dir = self.server.ui_dir
        if not ui_dir:
            self._send_json({"error": "no UI directory configured (--ui-dir)"}, status=404)
            return
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(ui_dir, rel))
        if not full.startswith(os.path.realpath(ui_dir) + os.sep) and full != os.path.realpath(
            os.path.join(ui_dir, "index.html")
        ):
            self._send_json({"error": "forbidden"}, status=403)
            return
        if not os.path.isfile(full):
            self._send_json({"error": "not found"}, status=404)
            return
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            body = fh.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class CollectorServer:
    """The HTTP server plus its store; start()/stop() for embedding."""

    def __init__(self, data_dir: str, bind: str = "127.0.0.1", port: int = 0,
                 ui_dir: str | None = None):
        self.store = CollectorStore(data_dir)
        self.ui_dir = ui_dir
        self._httpd = ThreadingHTTPServer((bind, port), _Handler)
        self._httpd.store = self.store  # type: ignore[attr-defined]
        self._httpd.ui_dir = ui_dir  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "CollectorServer":
        self._thread = threading.Thread(
            target=self.serve_forever, name="hiq-collector", daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        # short poll so shutdown() returns promptly
        self._httpd.serve_forever(poll_interval=0.05)

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None
        self.store.close()


class CollectorClient:
    """Thin JSON client for the collector API (agent, sinks, tests)."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, payload=None):
        data = None
        headers = {}
        if payload is not None:
            data = json.dumps(payload).encode("utf-8")
            headers["Content-Type"] = "application/json"
        request = urllib.request.Request(
            self.base_url + path, data=data, method=method, headers=headers
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as resp:
            body = resp.read()
        return json.loads(body) if body else None

    def healthz(self) -> dict:
        return self._request("GET", "/v1/healthz")

    def post_trees(self, batch: dict) -> dict:
        return self._request("POST", "/v1/trees", batch)

    def post_spans(self, spans: list[SpanRecord] | list[dict]) -> dict:
        wire = [span_to_wire(s) if isinstance(s, SpanRecord) else s for s in spans]
        return self._request("POST", "/v1/spans", wire)

    def list_trees(self, **filters) -> list[dict]:
        query = urllib.parse.urlencode({k: v for k, v in filters.items() if v is not None})
        return self._request("GET", "/v1/trees" + (f"?{query}" if query else ""))

    def query_trace(self, trace_id: str) -> dict:
        return self._request("GET", f"/v1/traces/{urllib.parse.quote(trace_id)}")

    def get_config(self, host: str) -> tuple[int, dict]:
        out = self._request("GET", f"/v1/config?host={urllib.parse.quote(host)}")
        return out["revision"], out["block"]

    def put_config(self, host: str, block: dict) -> int:
        out = self._request("PUT", f"/v1/config?host={urllib.parse.quote(host)}", block)
        return out["revision"]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hiq-collector",
        description="Collector service: ingest trees and spans, serve queries and config.",
    )
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--data", required=True, help="data directory for the append-only log")
    parser.add_argument("--bind", default="127.0.0.1", help="bind address (default localhost)")
    parser.add_argument("--ui-dir", default=os.environ.get("HIQ_UI_DIR"),
                        help="directory with the built console, served under /ui")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    server = CollectorServer(args.data, bind=args.bind, port=args.port, ui_dir=args.ui_dir)
    logger.info("collector listening on %s (data in %s)", server.url, args.data)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0
