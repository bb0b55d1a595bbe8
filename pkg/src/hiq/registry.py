"""Bounded in-memory tree map and the flush/shipping pipeline.

Finished trees land in a TreeMap keyed by (metric, tree id). When the map
reaches its maximum size, all entries are packaged into a TreeBatch, handed
to a bounded queue, and the map is reset. Enqueueing never blocks: on a full
queue the batch is dropped and counted, so tracing can never stall the
traced program. A shipping worker drains the queue in its own thread and
writes each batch to every configured sink.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import sys
import threading
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field

from .tree import HiQTree, render_tree, tree_to_wire

logger = logging.getLogger(__name__)

DEFAULT_MAX_SIZE = 64
DEFAULT_QUEUE_CAPACITY = 16

_SHUTDOWN = object()

SINK_STDOUT = "stdout"
SINK_FILE = "file_jsonl"
SINK_HTTP = "collector_http"

_RETRY_BACKOFFS_S = (0.2, 0.4, 0.8)


class SinkError(Exception):
    pass


@dataclass(frozen=True)
class Sink:
    kind: str
    endpoint: str = ""

    @classmethod
    def from_spec(cls, spec: str) -> "Sink":
        """Parse a CLI sink spec: ``stdout``, ``file:PATH``, or an http URL."""
        if spec == "stdout":
            return cls(kind=SINK_STDOUT)
        if spec.startswith("file:"):
            path = spec[len("file:"):]
            if not path:
                raise SinkError("file sink needs a path: file:PATH")
            return cls(kind=SINK_FILE, endpoint=path)
        if spec.startswith("http:") or spec.startswith("https:"):
            if "//" not in spec:
                raise SinkError(f"http sink needs a full URL, got '{spec}'")
            return cls(kind=SINK_HTTP, endpoint=spec.rstrip("/"))
        raise SinkError(f"unknown sink spec '{spec}' (expected stdout, file:PATH, or http URL)")


@dataclass
class TreeBatch:
    batch_id: str
    host: str
    trees: list[dict]
    sent_at_us: int

    def to_wire(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "host": self.host,
            "sent_at_us": self.sent_at_us,
            "trees": self.trees,
        }


class TreeMap:
    """Bounded map of finished trees; flushing batches them onto the queue.

    put_tree runs on traced threads: the critical section is short and does
    no I/O. Dropped batches (full queue) are counted, never raised.
    """

    def __init__(
        self,
        max_size: int = DEFAULT_MAX_SIZE,
        out_queue: queue.Queue | None = None,
        host: str | None = None,
    ):
        if max_size < 1:
            raise ValueError("max_size must be >= 1")
        self.max_size = max_size
        self.queue = out_queue if out_queue is not None else queue.Queue(DEFAULT_QUEUE_CAPACITY)
        self.host = host or socket.gethostname()
        self.entries: dict[tuple[str, str], HiQTree] = {}
        self.flush_count = 0
        self.dropped_count = 0
        self._lock = threading.Lock()

    def put_tree(self, tree: HiQTree) -> None:
        with self._lock:
            self.entries[(tree.metric.name, tree.tree_id)] = tree
            if len(self.entries) >= self.max_size:
                self._flush_locked()

    def flush_now(self) -> int:
        """Flush whatever is buffered (shutdown path); returns the count."""
        with self._lock:
            count = len(self.entries)
            if count:
                self._flush_locked()
            return count

    def _flush_locked(self) -> None:
        trees = [tree_to_wire(t) for t in self.entries.values()]
        self.entries.clear()
        self.flush_count += 1
        batch = TreeBatch(
            batch_id=uuid.uuid4().hex,
            host=self.host,
            trees=trees,
            sent_at_us=int(time.time() * 1e6),
        )
        try:
            self.queue.put_nowait(batch)
        except queue.Full:
            self.dropped_count += len(trees)
            logger.warning("flush queue full; dropped a batch of %d trees", len(trees))


# ---------------------------------------------------------------------------
# sink writers


def _write_file_jsonl(sink: Sink, batch: TreeBatch) -> None:
    with open(sink.endpoint, "a", encoding="utf-8") as fh:
        for tree in batch.trees:
            fh.write(json.dumps(tree) + "\n")


def _write_stdout(sink: Sink, batch: TreeBatch) -> None:
    from .tree import wire_to_tree

    for obj in batch.trees:
        print(render_tree(wire_to_tree(obj)), file=sys.stdout)


def _post_collector(sink: Sink, batch: TreeBatch) -> None:
    body = json.dumps(batch.to_wire()).encode("utf-8")
    url = sink.endpoint + "/v1/trees"
    last_error: Exception | None = None
    for i, backoff in enumerate((0.0,) + _RETRY_BACKOFFS_S):
        if backoff:
            time.sleep(backoff)
        request = urllib.request.Request(
            url, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=10) as resp:
                resp.read()
            return
        except (urllib.error.URLError, OSError) as exc:
            last_error = exc
    raise SinkError(f"POST {url} failed after {len(_RETRY_BACKOFFS_S)} retries: {last_error}")


_WRITERS = {
    SINK_FILE: _write_file_jsonl,
    SINK_STDOUT: _write_stdout,
    SINK_HTTP: _post_collector,
}


def worker_drain(in_queue: queue.Queue, sinks: list[Sink]) -> dict[str, int]:
    """Drain batches to every sink until the shutdown sentinel arrives.

    Sink failures are logged and counted; they never reach the traced
    program. Returns per-outcome counters (useful in tests).
    """
    stats = {"batches": 0, "trees": 0, "sink_failures": 0}
    while True:
        item = in_queue.get()
        if item is _SHUTDOWN:
            break
        batch: TreeBatch = item
        stats["batches"] += 1
        stats["trees"] += len(batch.trees)
        for sink in sinks:
            try:
                _WRITERS[sink.kind](sink, batch)
            except Exception as exc:
                stats["sink_failures"] += 1
                logger.error(
                    "sink %s(%s) failed for batch %s (%d trees): %s",
                    sink.kind, sink.endpoint, batch.batch_id, len(batch.trees), exc,
                )
    return stats


class ShippingWorker:
    """Owns the drain loop on a daemon thread."""

    def __init__(self, in_queue: queue.Queue, sinks: list[Sink]):
        self.queue = in_queue
        self.sinks = list(sinks)
        self.stats: dict[str, int] = {}
        self._thread: threading.Thread | None = None

    def start(self) -> "ShippingWorker":
        self._thread = threading.Thread(target=self._run, name="hiq-shipper", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        self.stats = worker_drain(self.queue, self.sinks)

    def stop(self, timeout: float | None = 30.0) -> None:
        """Queue the sentinel and wait; batches already queued still drain."""
        if self._thread is None:
            return
        self.queue.put(_SHUTDOWN)
        self._thread.join(timeout)
        self._thread = None
