import os
import statistics
import time

import pytest

from hiq.metrics import (
    BUILTIN_NAMES,
    MetricError,
    MetricKind,
    MetricProvider,
    ProviderRegistry,
    builtin_provider,
    kind_for_name,
)


def test_builtin_names_and_units():
    latency = builtin_provider("latency")
    memory = builtin_provider("memory")
    disk = builtin_provider("disk_io")
    assert latency.kind.unit == "us"
    assert memory.kind.kind == "memory_rss" and memory.kind.unit == "byte"
    assert disk.kind.kind == "disk_io" and disk.kind.unit == "byte"


def test_unknown_builtin_rejected():
    with pytest.raises(MetricError, match="unknown builtin"):
        builtin_provider("latency2")


def test_latency_monotone_over_many_pairs():
    sample = builtin_provider("latency").sample
    previous = sample()
    for _ in range(100_000):
        current = sample()
        assert current >= previous
        previous = current


def test_latency_sampling_cost_under_5us_median():
    sample = builtin_provider("latency").sample
    sample()
    costs = []
    for _ in range(5000):
        t0 = time.perf_counter_ns()
        sample()
        costs.append(time.perf_counter_ns() - t0)
    assert statistics.median(costs) < 5_000


def _vmrss_bytes() -> int:
    # independent oracle: the OS process-status report, not statm
    with open("/proc/self/status") as fh:
        for line in fh:
            if line.startswith("VmRSS:"):
                return int(line.split()[1]) * 1024
    raise AssertionError("VmRSS not found")


def test_memory_provider_sees_large_allocation():
    provider = builtin_provider("memory")
    oracle_before = _vmrss_bytes()
    before = provider.sample()
    block = bytearray(64 * 2**20)  # zero-filled, so pages are touched
    after = provider.sample()
    oracle_after = _vmrss_bytes()
    del block
    grow = 48 * 2**20
    assert after - before >= grow
    assert oracle_after - oracle_before >= grow
    # provider agrees with the oracle to within a few MiB of noise
    assert abs((after - before) - (oracle_after - oracle_before)) < 8 * 2**20


def test_disk_io_provider_counts_written_bytes(tmp_path):
    provider = builtin_provider("disk_io")
    n = 4 * 2**20
    before = provider.sample()
    path = tmp_path / "blob.bin"
    with open(path, "wb") as fh:
        fh.write(b"\xab" * n)
        fh.flush()
        os.fsync(fh.fileno())
    after = provider.sample()
    assert after - before >= n  # oracle: the file size just written


def test_memory_and_disk_sampling_reasonably_fast():
    # informal bound; these read /proc so they are slower than the clock
    for name in ("memory", "disk_io"):
        sample = builtin_provider(name).sample
        sample()
        costs = []
        for _ in range(300):
            t0 = time.perf_counter_ns()
            sample()
            costs.append(time.perf_counter_ns() - t0)
        assert statistics.median(costs) < 50_000, name


# -- registry ------------------------------------------------------------


def _fd_provider(name="open_fds") -> MetricProvider:
    return MetricProvider(
        kind=MetricKind(kind="custom", unit="fd", name=name),
        sample=lambda: float(len(os.listdir("/proc/self/fd"))),
        description="open file descriptors",
    )


def test_register_and_get_custom_provider():
    registry = ProviderRegistry()
    registry.register(_fd_provider())
    provider = registry.get("open_fds")
    assert provider.kind.unit == "fd"
    assert provider.sample() > 0


def test_custom_provider_observes_fd_delta(tmp_path):
    provider = _fd_provider()
    before = provider.sample()
    handles = [open(tmp_path / f"f{i}", "w") for i in range(5)]
    after = provider.sample()
    for handle in handles:
        handle.close()
    assert after - before >= 5


def test_reregister_without_override_rejected():
    registry = ProviderRegistry()
    registry.register(_fd_provider())
    with pytest.raises(MetricError, match="already registered"):
        registry.register(_fd_provider())
    registry.register(_fd_provider(), override=True)  # explicit override allowed


def test_register_with_empty_unit_rejected():
    registry = ProviderRegistry()
    bad = MetricProvider(kind=MetricKind(kind="custom", unit="", name="x"), sample=lambda: 0.0)
    with pytest.raises(MetricError, match="unit"):
        registry.register(bad)


def test_overriding_builtin_requires_flag():
    registry = ProviderRegistry()
    fake = MetricProvider(kind=MetricKind(kind="latency", unit="us", name="latency"),
                          sample=lambda: 0.0)
    with pytest.raises(MetricError, match="override"):
        registry.register(fake)
    registry.register(fake, override=True)
    assert registry.get("latency") is fake


def test_registry_falls_back_to_builtins():
    registry = ProviderRegistry()
    for name in BUILTIN_NAMES:
        assert registry.get(name).kind.name == name
    with pytest.raises(MetricError, match="no metric provider"):
        registry.get("nope")


def test_kind_for_name_maps_builtins_and_customs():
    assert kind_for_name("memory").kind == "memory_rss"
    custom = kind_for_name("open_fds", unit="fd")
    assert custom.kind == "custom" and custom.unit == "fd"
