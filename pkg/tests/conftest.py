from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import make_blob_fixture, make_survey_fixture  # noqa: E402

_ACCEPTANCE: list[tuple[str, str]] = []


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def offline(monkeypatch):
    """No test may open a network connection; the LLM client runs in mock mode."""

    def refuse(*args, **kwargs):
        raise NetworkBlocked("network access is disabled in tests")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(socket, "getaddrinfo", refuse)
    monkeypatch.delenv("LLM_API_KEY", raising=False)


@pytest.fixture
def blobs():
    return make_blob_fixture(seed=0)


@pytest.fixture(scope="session")
def survey_dir(tmp_path_factory):
    return make_survey_fixture(tmp_path_factory.mktemp("survey"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")


def load_json(path):
    return json.loads(Path(path).read_text())
