from __future__ import annotations

import socket
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from txlens.ingestion import load_fixture  # noqa: E402
from txlens.knowledge import CardStore, SelectorDB  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
FIXTURE_NAMES = sorted(p.name[: -len(".fixture.json")] for p in FIXTURES.glob("*.fixture.json"))

USER = "0x5a52e96bacdabb82fd05763e25335261b270efcb"
WETH = "0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2"
USDC = "0xa0b86991c6218b36c1d19d4a2e9eb0ce3606eb48"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def case_study():
    return load_fixture(FIXTURES / "case_study.fixture.json")


@pytest.fixture
def db() -> SelectorDB:
    return SelectorDB.builtin()


@pytest.fixture
def store() -> CardStore:
    return CardStore.builtin()


_STARTED = time.perf_counter()
SUITE_LIMIT_S = 60.0


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any real socket connection during the suite is a test failure."""

    def refuse(*args, **kwargs):
        raise OSError("network access is disabled in tests")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    elapsed = time.perf_counter() - _STARTED
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in LINES:
        terminalreporter.write_line(line)
    verdict = "PASS" if elapsed < SUITE_LIMIT_S else "FAIL"
    terminalreporter.write_line(f"criterion 7 (suite runtime): {verdict} full run took {elapsed:.1f} s (limit {SUITE_LIMIT_S:.0f} s)")
