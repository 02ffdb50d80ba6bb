from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (seconds to minutes)")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one summary line; printed together at the end of the session."""
    def record(number, title, passed, detail, status=None):
        status = status or ("PASS" if passed else "FAIL")
        ACCEPTANCE_LINES.append((number, f"criterion {number} [{status}] {title}: {detail}"))
        print(ACCEPTANCE_LINES[-1][1])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
