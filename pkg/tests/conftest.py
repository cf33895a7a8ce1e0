import pytest

from lorans.config import from_dict
from lorans.server import NetworkServer


@pytest.fixture
def live_server():
    """Factory for a threaded server on ephemeral localhost ports."""
    started = []

    def make(**overrides):
        doc = dict(connector=dict(host="127.0.0.1", port=0), admin=dict(host="127.0.0.1", port=0))
        for key, value in overrides.items():
            if isinstance(value, dict):
                doc.setdefault(key, {}).update(value)
            else:
                doc[key] = value
        server = NetworkServer(from_dict(doc)).start()
        started.append(server)
        return server

    yield make
    for server in started:
        server.stop()


def pytest_terminal_summary(terminalreporter):
    from criteria import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
