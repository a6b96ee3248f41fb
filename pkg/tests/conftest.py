import numpy as np
import pytest
from hypothesis import settings

from ettrack import tensor

settings.register_profile("ettrack", deadline=None, max_examples=40)
settings.load_profile("ettrack")

ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def check_finite(monkeypatch):
    monkeypatch.setattr(tensor, "CHECK_FINITE", True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
