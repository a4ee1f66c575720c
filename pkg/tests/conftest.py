import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
