import sys

import pytest

_RESULTS = []


@pytest.fixture
def criterion():
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        _RESULTS.append((number, line))
        print(line, file=sys.__stdout__, flush=True)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS):
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread_env(monkeypatch):
    monkeypatch.delenv("MPK_THREADS", raising=False)
    monkeypatch.delenv("MPK_SOFTRAS_BACKEND", raising=False)
    yield
