from __future__ import annotations

import pytest

import helpers
from hiq.collector import CollectorServer


@pytest.fixture
def stub_module():
    """Factory for throwaway importable modules; cleans up after the test."""
    created: list[str] = []

    def factory(name: str, source: str):
        module = helpers.make_module(name, source)
        created.append(name)
        return module

    yield factory
    for name in created:
        helpers.drop_module(name)


@pytest.fixture
def collector(tmp_path):
    """A running collector on an ephemeral port; stopped after the test."""
    servers: list[CollectorServer] = []

    def factory(data_dir=None, **kwargs) -> CollectorServer:
        server = CollectorServer(str(data_dir or tmp_path / "collector-data"), **kwargs)
        servers.append(server)
        return server.start()

    yield factory
    for server in servers:
        try:
            server.stop()
        except Exception:
            pass
