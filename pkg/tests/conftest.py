import pytest

from mroffload import alga
from mroffload._outbox import DropPolicy
from mroffload.polyp import Router


@pytest.fixture
def router():
    r = Router(("127.0.0.1", 0), heartbeat_interval=0.5).start()
    yield r
    r.stop()


@pytest.fixture
def block_router():
    r = Router(("127.0.0.1", 0), drop_policy=DropPolicy.BLOCK, heartbeat_interval=0.5).start()
    yield r
    r.stop()


@pytest.fixture
def make_node():
    nodes = []

    def factory(router, name="node", **kw):
        cfg = alga.NodeConfig(router.address_str, name, heartbeat_interval=kw.pop("heartbeat_interval", 0.5), **kw)
        node = alga.connect(cfg, timeout=5.0)
        nodes.append(node)
        return node

    yield factory
    for node in nodes:
        node.close()


_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, line: str) -> None:
    _CRITERIA[number] = line


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
