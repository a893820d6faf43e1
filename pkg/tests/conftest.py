from __future__ import annotations

import threading
from collections import Counter
from pathlib import Path

import pytest

from rankflow.backend import Exchange, FunctionBackend, estimate_tokens

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

_acceptance: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")


def role_of(messages) -> str:
    system = messages[0].text
    if system.startswith("You are an AI retrieval assistant"):
        return "rewriter"
    if system.startswith("You are an AI retrieval expert"):
        return "answerer"
    if "summarizing passages" in system:
        return "summarizer"
    return "reranker"


def echo(messages) -> str:
    """Identity replies: rewriter/answerer echo the query, summarizer the passage."""
    last = messages[-1].text
    if role_of(messages) == "summarizer":
        return last.split("Passage: ", 1)[1]
    return last


class CountingBackend:
    """Counts calls per role (recognised by system prompt) and forwards them."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.calls = Counter()
        self._lock = threading.Lock()

    def complete(self, messages, params) -> Exchange:
        with self._lock:
            self.calls[role_of(messages)] += 1
        return self.inner.complete(messages, params)


@pytest.fixture
def echo_backend():
    return FunctionBackend(echo, name="echo")


def make_exchange(input_tokens, output_tokens, latency_ms=0, query_id=None, role=None) -> Exchange:
    return Exchange((), "", input_tokens, output_tokens, latency_ms, "test", query_id, role)
