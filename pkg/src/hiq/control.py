"""Shared-memory control plane.

A single small file (fast under /dev/shm, any path works) holds the switch
set that governs live tracing: a 16-byte header (magic ``HIQC``, format
version, change counter) + a 4-byte payload length + a UTF-8 JSON payload.
Writes go to a temp file and are published with an atomic rename, and the
reader re-checks the change counter after reading, so concurrent readers
never observe a torn state.

The agent (``hiq-agent``) polls the collector's config endpoint and syncs
accepted changes into the file; traced processes poll the file through a
cached ControlView so the per-call hot path stays free of file I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import tempfile
import threading
import time
import urllib.error
from dataclasses import dataclass, field, replace

logger = logging.getLogger(__name__)

MAGIC = b"HIQC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, seq
_LEN = struct.Struct("<I")

ENV_CTRL_PATH = "HIQ_CTRL_PATH"
ENV_POLL_MS = "HIQ_CTRL_POLL_MS"
DEFAULT_POLL_MS = 100

#: Wildcard entry meaning "every metric enabled".
ALL_METRICS = "*"

OVERRIDE_VALUES = ("on", "off", "inherit")


class ControlError(Exception):
    pass


class ControlFileMissing(ControlError):
    """No control file at the path; callers fall back to defaults."""


class ControlDecodeError(ControlError):
    """The control file payload is corrupt."""


@dataclass(frozen=True)
class ControlBlock:
    version: int = FORMAT_VERSION
    seq: int = 0
    global_enabled: bool = True
    enabled_metrics: frozenset[str] = frozenset({ALL_METRICS})
    target_overrides: dict[str, str] = field(default_factory=dict)
    concise_threshold_us: int = 0
    sample_rate: float = 1.0

    def validate(self) -> None:
        problems = validate_block_dict(block_to_dict(self))
        if problems:
            raise ControlError("invalid control block: " + "; ".join(problems))


DEFAULT_BLOCK = ControlBlock()


def block_to_dict(block: ControlBlock) -> dict:
    return {
        "version": block.version,
        "seq": block.seq,
        "global_enabled": block.global_enabled,
        "enabled_metrics": sorted(block.enabled_metrics),
        "target_overrides": dict(block.target_overrides),
        "concise_threshold_us": block.concise_threshold_us,
        "sample_rate": block.sample_rate,
    }


def validate_block_dict(obj) -> list[str]:
    """Return the list of violated invariants (empty when valid)."""
    problems: list[str] = []
    if not isinstance(obj, dict):
        return ["block must be a JSON object"]
    if not isinstance(obj.get("global_enabled", True), bool):
        problems.append("global_enabled must be a bool")
    metrics = obj.get("enabled_metrics", [ALL_METRICS])
    if not isinstance(metrics, (list, set, frozenset)) or not all(
        isinstance(m, str) and m for m in metrics
    ):
        problems.append("enabled_metrics must be a list of non-empty strings")
    overrides = obj.get("target_overrides", {})
    if not isinstance(overrides, dict):
        problems.append("target_overrides must be an object")
    else:
        for name, value in overrides.items():
            if value not in OVERRIDE_VALUES:
                problems.append(
                    f"target_overrides['{name}'] must be one of {OVERRIDE_VALUES}"
                )
    threshold = obj.get("concise_threshold_us", 0)
    if isinstance(threshold, bool) or not isinstance(threshold, int) or threshold < 0:
        problems.append("concise_threshold_us must be an integer >= 0")
    rate = obj.get("sample_rate", 1.0)
    if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
        problems.append("sample_rate must be a number in [0, 1]")
    return problems


def block_from_dict(obj) -> ControlBlock:
    problems = validate_block_dict(obj)
    if problems:
        raise ControlDecodeError("; ".join(problems))
    return ControlBlock(
        version=int(obj.get("version", FORMAT_VERSION)),
        seq=int(obj.get("seq", 0)),
        global_enabled=bool(obj.get("global_enabled", True)),
        enabled_metrics=frozenset(obj.get("enabled_metrics", [ALL_METRICS])),
        target_overrides=dict(obj.get("target_overrides", {})),
        concise_threshold_us=int(obj.get("concise_threshold_us", 0)),
        sample_rate=float(obj.get("sample_rate", 1.0)),
    )


# ---------------------------------------------------------------------------
# file protocol


def _read_header(path: str) -> int:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise ControlDecodeError("control file shorter than its header")
    magic, _version, seq = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ControlDecodeError(f"bad magic {magic!r}")
    return seq


def write_control(path: str, block: ControlBlock) -> ControlBlock:
    """Atomically publish the block with the file's change counter bumped.

    The caller's ``block.seq`` is ignored; the stored counter increments on
    every successful write (first write stores seq 1). Returns the block as
    written.
    """
    block.validate()
    try:
        seq = _read_header(path) + 1
    except (FileNotFoundError, ControlError):
        seq = 1
    stamped = replace(block, seq=seq, version=FORMAT_VERSION)
    payload = json.dumps(block_to_dict(stamped)).encode("utf-8")
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, seq) + _LEN.pack(len(payload)) + payload

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".hiqc-", dir=directory)
    try:
        os.write(fd, blob)
        os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)
    return stamped


def _parse_blob(blob: bytes) -> tuple[int, ControlBlock]:
    if len(blob) < _HEADER.size + _LEN.size:
        raise ControlDecodeError("control file truncated before payload length")
    magic, _version, seq = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ControlDecodeError(f"bad magic {magic!r}")
    (length,) = _LEN.unpack_from(blob, _HEADER.size)
    payload = blob[_HEADER.size + _LEN.size : _HEADER.size + _LEN.size + length]
    if len(payload) != length:
        raise ControlDecodeError("control payload truncated")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ControlDecodeError(f"control payload is not valid JSON: {exc}") from exc
    block = block_from_dict(obj)
    if block.seq != seq:
        raise ControlDecodeError(f"header seq {seq} != payload seq {block.seq}")
    return seq, block


def read_control(path: str, retries: int = 5) -> ControlBlock:
    """Read a consistent snapshot of the control block.

    Seqlock-style: read the change counter, read the payload, then re-read
    the counter from the same descriptor and retry (up to ``retries`` times)
    if an in-place writer moved it mid-read. Rename-published writes never
    trip the check because the opened file's bytes are immutable.
    """
    attempts = retries + 1
    for _ in range(attempts):
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
                fh.seek(0)
                header_after = fh.read(_HEADER.size)
        except FileNotFoundError as exc:
            raise ControlFileMissing(path) from exc
        seq, block = _parse_blob(blob)
        if len(header_after) == _HEADER.size:
            _, _, seq_after = _HEADER.unpack(header_after)
            if seq_after == seq:
                return block
    raise ControlError(f"control file kept changing across {attempts} read attempts")


# ---------------------------------------------------------------------------
# reader-side cached view


class ControlView:
    """Cached snapshot of the control block, refreshed at most every poll.

    The hot path calls :meth:`current`, which is a monotonic-clock compare
    except once per poll interval. A missing file yields defaults (tracing
    enabled, no overrides); a corrupt file keeps the last good snapshot.
    """

    def __init__(self, path: str | None = None, poll_ms: int | None = None):
        if path is None:
            path = os.environ.get(ENV_CTRL_PATH) or None
        if poll_ms is None:
            poll_ms = int(os.environ.get(ENV_POLL_MS) or DEFAULT_POLL_MS)
        self.path = path
        self.poll_interval_us = poll_ms * 1000
        self.snapshot: ControlBlock = DEFAULT_BLOCK
        self.fetched_at_us = 0
        self._next_refresh = 0.0
        self._lock = threading.Lock()

    def current(self) -> ControlBlock:
        if self.path is None:
            return self.snapshot
        now = time.monotonic()
        if now < self._next_refresh:
            return self.snapshot
        with self._lock:
            if now < self._next_refresh:
                return self.snapshot
            self._next_refresh = now + self.poll_interval_us / 1e6
            try:
                self.snapshot = read_control(self.path)
            except ControlFileMissing:
                self.snapshot = DEFAULT_BLOCK
            except ControlError as exc:
                logger.warning("control read failed, keeping last snapshot: %s", exc)
            self.fetched_at_us = int(time.time() * 1e6)
        return self.snapshot


def effective_state(block: ControlBlock, target_name: str, metric_name: str) -> bool:
    """Should a call to this target be traced for this metric?

    Pure and total: master switch first, then metric enablement, then the
    per-target override ("on"/"inherit" trace, "off" doesn't). Root-call
    sampling is applied by the interceptor, not here.
    """
    if not block.global_enabled:
        return False
    metrics = block.enabled_metrics
    if metric_name not in metrics and ALL_METRICS not in metrics:
        return False
    return block.target_overrides.get(target_name, "inherit") != "off"


# ---------------------------------------------------------------------------
# agent


def agent_sync(
    collector_url: str,
    host: str,
    path: str,
    poll_s: float = 1.0,
    stop: threading.Event | None = None,
    max_backoff_s: float = 30.0,
) -> None:
    """Poll the collector's config endpoint and sync changes into the file.

    On a changed config revision the new block is published via
    write_control; while the collector is unreachable the last block stays
    in place and polling backs off (capped at ``max_backoff_s``).
    """
    from .collector import CollectorClient

    client = CollectorClient(collector_url)
    stop = stop or threading.Event()
    last_revision: int | None = None
    delay = poll_s
    while not stop.is_set():
        try:
            revision, block_dict = client.get_config(host)
        except (urllib.error.URLError, OSError, ControlError) as exc:
            logger.warning("collector unreachable (%s); keeping last control block", exc)
            stop.wait(delay)
            delay = min(delay * 2, max_backoff_s)
            continue
        delay = poll_s
        if revision != last_revision:
            try:
                written = write_control(path, block_from_dict(block_dict))
            except ControlError as exc:
                logger.error("rejected collector config revision %s: %s", revision, exc)
            else:
                logger.info("applied config revision %s as seq %s", revision, written.seq)
                last_revision = revision
        stop.wait(poll_s)


def agent_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hiq-agent",
        description="Sync collector-held tracing configuration into the shared-memory control file.",
    )
    parser.add_argument("--collector", required=True, help="collector base URL")
    parser.add_argument("--host", required=True, help="host name used for config scoping")
    parser.add_argument("--ctrl", required=True, help="control file path")
    parser.add_argument("--poll-ms", type=int, default=1000, help="poll interval (default 1000)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        agent_sync(args.collector, args.host, args.ctrl, poll_s=args.poll_ms / 1000.0)
    except KeyboardInterrupt:
        pass
    return 0
