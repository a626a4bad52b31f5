import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register their PASS/FAIL lines here
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
