import numpy as np
import pytest

from mdiqkd.params import TABLE1_30DB, TABLE1_33DB, TABLE2_DEVICE, db_to_transmittance


@pytest.fixture
def dev():
    return TABLE2_DEVICE


@pytest.fixture
def table1_30():
    return TABLE1_30DB


@pytest.fixture
def table1_33():
    return TABLE1_33DB


@pytest.fixture
def eta_30():
    return db_to_transmittance(25.0), db_to_transmittance(5.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record and print one pass/fail line per acceptance criterion."""

    def _report(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
