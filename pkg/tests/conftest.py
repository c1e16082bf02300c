import asyncio
import math
from pathlib import Path

import pytest

from sensfan.campaign import Campaign, ParameterSpec, Uniform
from sensfan.events import EventLog
from sensfan.worker import ServerHandle, WorkerResponse

GOLDEN = Path(__file__).parent / "golden"

# filled by test_acceptance, printed at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def ishigami_specs():
    return [ParameterSpec(f"x{i}", Uniform(-math.pi, math.pi)) for i in (1, 2, 3)]


@pytest.fixture
def campaign(tmp_path, ishigami_specs):
    camp = Campaign.create("test", ishigami_specs, tmp_path / "camp")
    yield camp
    camp.close()


class StubWorker:
    """Answers every request through ``fn(payload, n)`` (``n`` counts requests)."""

    def __init__(self, fn):
        self.fn = fn
        self.events = EventLog()
        self.requests: list[bytes] = []
        self.headers: list[dict] = []

    async def handle(self, payload):
        self.requests.append(payload)
        out = self.fn(payload, len(self.requests))
        if asyncio.iscoroutine(out):
            out = await out
        return out if isinstance(out, WorkerResponse) else WorkerResponse(*out)


@pytest.fixture
def stub_server():
    handles = []

    def start(fn):
        h = ServerHandle(StubWorker(fn), shutdown_timeout=1.0).start()
        handles.append(h)
        return h

    yield start
    for h in handles:
        h.close()
