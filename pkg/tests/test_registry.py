import json
import queue
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

import helpers
from hiq.registry import (
    _SHUTDOWN,
    ShippingWorker,
    Sink,
    SinkError,
    TreeMap,
    worker_drain,
)
from hiq.tree import wire_to_tree


def _tree(rng=None):
    rng = rng or random.Random(0)
    return helpers.build_tree(helpers.random_tree_spec(rng, max_depth=2, max_fanout=2))


# -- sink specs ----------------------------------------------------------------


def test_sink_spec_parsing(tmp_path):
    assert Sink.from_spec("stdout").kind == "stdout"
    file_sink = Sink.from_spec(f"file:{tmp_path}/t.jsonl")
    assert file_sink.kind == "file_jsonl" and file_sink.endpoint.endswith("t.jsonl")
    http_sink = Sink.from_spec("http://127.0.0.1:9000/")
    assert http_sink.kind == "collector_http"
    assert http_sink.endpoint == "http://127.0.0.1:9000"


@pytest.mark.parametrize("bad", ["file:", "ftp://x", "http:", "nonsense"])
def test_sink_spec_rejects_malformed(bad):
    with pytest.raises(SinkError):
        Sink.from_spec(bad)


# -- tree map ------------------------------------------------------------------


def test_put_flushes_at_max_size():
    q = queue.Queue(4)
    tree_map = TreeMap(max_size=3, out_queue=q, host="h")
    rng = random.Random(1)
    for _ in range(3):
        tree_map.put_tree(_tree(rng))
    assert tree_map.entries == {}
    assert tree_map.flush_count == 1
    batch = q.get_nowait()
    assert len(batch.trees) == 3
    assert batch.host == "h"
    assert batch.batch_id


def test_put_below_max_size_keeps_entries():
    tree_map = TreeMap(max_size=3, out_queue=queue.Queue(4))
    rng = random.Random(2)
    tree_map.put_tree(_tree(rng))
    tree_map.put_tree(_tree(rng))
    assert len(tree_map.entries) == 2
    assert tree_map.flush_count == 0


def test_full_queue_drops_batch_and_counts():
    q = queue.Queue(1)
    tree_map = TreeMap(max_size=3, out_queue=q)
    rng = random.Random(3)
    for _ in range(3):
        tree_map.put_tree(_tree(rng))  # fills the queue
    for _ in range(3):
        tree_map.put_tree(_tree(rng))  # second flush must drop
    assert tree_map.dropped_count == 3
    assert tree_map.flush_count == 2
    assert q.qsize() == 1


def test_flush_now_empty_and_partial():
    q = queue.Queue(4)
    tree_map = TreeMap(max_size=10, out_queue=q)
    assert tree_map.flush_now() == 0
    assert q.qsize() == 0
    rng = random.Random(4)
    tree_map.put_tree(_tree(rng))
    tree_map.put_tree(_tree(rng))
    assert tree_map.flush_now() == 2
    assert q.qsize() == 1
    assert tree_map.entries == {}


def test_flush_now_after_partial_fill():
    q = queue.Queue(4)
    tree_map = TreeMap(max_size=10, out_queue=q)
    rng = random.Random(5)
    for _ in range(7):
        tree_map.put_tree(_tree(rng))
    assert tree_map.flush_now() == 7


def test_map_never_exceeds_bound():
    q = queue.Queue(10_000)
    tree_map = TreeMap(max_size=5, out_queue=q)
    rng = random.Random(6)
    for _ in range(1000):
        tree_map.put_tree(_tree(rng))
        assert len(tree_map.entries) <= 5


def test_same_tree_id_overwrites_not_grows():
    q = queue.Queue(4)
    tree_map = TreeMap(max_size=10, out_queue=q)
    tree = _tree()
    tree_map.put_tree(tree)
    tree_map.put_tree(tree)
    assert len(tree_map.entries) == 1


# -- worker and sinks ------------------------------------------------------------


def test_worker_writes_jsonl_lines(tmp_path):
    path = tmp_path / "out.jsonl"
    q = queue.Queue(8)
    tree_map = TreeMap(max_size=3, out_queue=q)
    rng = random.Random(7)
    for _ in range(3):
        tree_map.put_tree(_tree(rng))
    q.put(_SHUTDOWN)
    stats = worker_drain(q, [Sink.from_spec(f"file:{path}")])
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        wire_to_tree(json.loads(line))  # each line decodes
    assert stats == {"batches": 1, "trees": 3, "sink_failures": 0}


def test_worker_drains_remaining_batches_before_exit(tmp_path):
    path = tmp_path / "out.jsonl"
    q = queue.Queue(8)
    rng = random.Random(8)
    tree_map = TreeMap(max_size=1, out_queue=q)
    for _ in range(5):
        tree_map.put_tree(_tree(rng))
    worker = ShippingWorker(q, [Sink.from_spec(f"file:{path}")]).start()
    worker.stop()
    assert len(path.read_text().splitlines()) == 5


def test_sink_failures_logged_not_raised(tmp_path, caplog):
    bad_dir_sink = Sink(kind="file_jsonl", endpoint=str(tmp_path / "no_dir" / "x.jsonl"))
    q = queue.Queue(2)
    tree_map = TreeMap(max_size=1, out_queue=q)
    tree_map.put_tree(_tree())
    q.put(_SHUTDOWN)
    stats = worker_drain(q, [bad_dir_sink])
    assert stats["sink_failures"] == 1


def test_put_tree_does_no_sink_io(tmp_path, monkeypatch):
    """Hot-path isolation: sink writers only ever run on the worker thread."""
    import hiq.registry as registry_mod

    sink_threads = []
    real_writer = registry_mod._WRITERS["file_jsonl"]

    def recording_writer(sink, batch):
        sink_threads.append(threading.get_ident())
        real_writer(sink, batch)

    monkeypatch.setitem(registry_mod._WRITERS, "file_jsonl", recording_writer)
    q = queue.Queue(64)
    tree_map = TreeMap(max_size=2, out_queue=q)
    worker = ShippingWorker(q, [Sink.from_spec(f"file:{tmp_path}/x.jsonl")]).start()
    rng = random.Random(9)
    for _ in range(10):
        tree_map.put_tree(_tree(rng))  # flushes happen on this thread
    worker.stop()
    assert sink_threads
    assert threading.get_ident() not in sink_threads


class _FlakyCollector(BaseHTTPRequestHandler):
    failures_left = 0
    received: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        cls = type(self)
        if cls.failures_left > 0:
            cls.failures_left -= 1
            self.send_response(500)
            self.end_headers()
            return
        cls.received.append(json.loads(body))
        payload = b'{"accepted": 1, "rejected": 0}'
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def test_http_sink_gives_up_after_retries_then_recovers():
    _FlakyCollector.failures_left = 4  # initial try + 3 retries all fail
    _FlakyCollector.received = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FlakyCollector)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        q = queue.Queue(8)
        tree_map = TreeMap(max_size=1, out_queue=q)
        tree_map.put_tree(_tree(random.Random(10)))  # this batch burns the failures
        tree_map.put_tree(_tree(random.Random(11)))  # this one lands
        q.put(_SHUTDOWN)
        stats = worker_drain(q, [Sink.from_spec(url)])
        assert stats["sink_failures"] == 1
        assert len(_FlakyCollector.received) == 1
        assert len(_FlakyCollector.received[0]["trees"]) == 1
    finally:
        server.shutdown()
        server.server_close()


def test_stdout_sink_renders(capsys):
    q = queue.Queue(2)
    tree_map = TreeMap(max_size=1, out_queue=q)
    tree_map.put_tree(helpers.build_tree(("main", 0.0, 1000.0, []), overhead_us=1))
    q.put(_SHUTDOWN)
    worker_drain(q, [Sink.from_spec("stdout")])
    out = capsys.readouterr().out
    assert "main: 1000us" in out
    assert "OH: 1us" in out
