"""Metric samplers.

Every tree is built from paired before/after samples of exactly one metric,
so tracing k metrics produces k trees per execution. Built-in providers cover
wall-free latency (monotonic clock, microseconds), resident-set size, and
cumulative process I/O bytes; custom providers can be registered under their
own name.
"""

from __future__ import annotations

import os
import resource
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

LATENCY = "latency"
MEMORY = "memory"
DISK_IO = "disk_io"

#: CLI/wire names of the built-in metrics.
BUILTIN_NAMES = (LATENCY, MEMORY, DISK_IO)


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class MetricKind:
    """Identity of a metric: family, unit, and its CLI/wire name."""

    kind: str  # "latency" | "memory_rss" | "disk_io" | "custom"
    unit: str
    name: str


LATENCY_KIND = MetricKind(kind="latency", unit="us", name=LATENCY)
MEMORY_KIND = MetricKind(kind="memory_rss", unit="byte", name=MEMORY)
DISK_IO_KIND = MetricKind(kind="disk_io", unit="byte", name=DISK_IO)

_BUILTIN_KINDS = {k.name: k for k in (LATENCY_KIND, MEMORY_KIND, DISK_IO_KIND)}


def kind_for_name(name: str, unit: str = "") -> MetricKind:
    """Map a wire/CLI metric name to its MetricKind (custom if unknown)."""
    known = _BUILTIN_KINDS.get(name)
    if known is not None:
        return known
    return MetricKind(kind="custom", unit=unit, name=name)


@dataclass(frozen=True)
class MetricProvider:
    """A sampler: a nullary callable returning a finite number.

    Samplers must be re-entrant and callable concurrently from multiple
    threads; apart from reading counters they must be side-effect free.
    """

    kind: MetricKind
    sample: Callable[[], float] = field(repr=False)
    description: str = ""

    @property
    def name(self) -> str:
        return self.kind.name


def _sample_latency_us() -> float:
    return time.perf_counter_ns() * 1e-3


_PAGE_SIZE = resource.getpagesize()
_statm_fd: int | None = None
_io_fd: int | None = None
_proc_lock = threading.Lock()


def _sample_rss_bytes() -> float:
    global _statm_fd
    fd = _statm_fd
    if fd is None:
        with _proc_lock:
            if _statm_fd is None:
                _statm_fd = os.open("/proc/self/statm", os.O_RDONLY)
            fd = _statm_fd
    # second statm field is resident pages
    return int(os.pread(fd, 128, 0).split()[1]) * _PAGE_SIZE


def _sample_io_bytes() -> float:
    """Cumulative bytes read+written by this process (rchar + wchar)."""
    global _io_fd
    fd = _io_fd
    if fd is None:
        with _proc_lock:
            if _io_fd is None:
                _io_fd = os.open("/proc/self/io", os.O_RDONLY)
            fd = _io_fd
    total = 0
    for line in os.pread(fd, 512, 0).splitlines():
        key, _, value = line.partition(b":")
        # some kernels expose rchar as bare "char"
        if key in (b"rchar", b"char", b"wchar"):
            total += int(value)
    return total


def builtin_provider(name: str) -> MetricProvider:
    """Return the built-in provider for "latency", "memory", or "disk_io"."""
    if name == LATENCY:
        return MetricProvider(
            kind=LATENCY_KIND,
            sample=_sample_latency_us,
            description="monotonic process clock, microseconds",
        )
    if name == MEMORY:
        return MetricProvider(
            kind=MEMORY_KIND,
            sample=_sample_rss_bytes,
            description="current resident-set size, bytes",
        )
    if name == DISK_IO:
        return MetricProvider(
            kind=DISK_IO_KIND,
            sample=_sample_io_bytes,
            description="cumulative process I/O, bytes read+written",
        )
    if name in _default_registry:
        raise MetricError(
            f"'{name}' is a custom metric; use register_provider/get_provider"
        )
    raise MetricError(f"unknown builtin metric '{name}' (expected one of {BUILTIN_NAMES})")


class ProviderRegistry:
    """Name → provider table backing CLI metric selection."""

    def __init__(self) -> None:
        self._providers: dict[str, MetricProvider] = {}

    def register(self, provider: MetricProvider, *, override: bool = False) -> None:
        name = provider.kind.name
        if not name:
            raise MetricError("provider name must be non-empty")
        if not provider.kind.unit:
            raise MetricError(f"provider '{name}' must declare a non-empty unit")
        if provider.kind.kind != "custom" and not override:
            raise MetricError(
                f"'{name}' overrides a builtin metric; pass override=True to allow it"
            )
        if name in self._providers and not override:
            raise MetricError(
                f"provider '{name}' is already registered; pass override=True to replace it"
            )
        self._providers[name] = provider

    def get(self, name: str) -> MetricProvider:
        if name in self._providers:
            return self._providers[name]
        if name in BUILTIN_NAMES:
            return builtin_provider(name)
        raise MetricError(f"no metric provider registered under '{name}'")

    def __contains__(self, name: str) -> bool:
        return name in self._providers


_default_registry = ProviderRegistry()


def register_provider(provider: MetricProvider, *, override: bool = False,
                      registry: ProviderRegistry | None = None) -> None:
    """Register a provider so it becomes selectable by name."""
    (registry or _default_registry).register(provider, override=override)


def get_provider(name: str, registry: ProviderRegistry | None = None) -> MetricProvider:
    """Look up a provider by CLI name (builtin or registered custom)."""
    return (registry or _default_registry).get(name)
