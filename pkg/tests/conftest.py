import sys

import numpy as np
import pytest

from semaug.numerics import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.VERDICTS:
        terminalreporter.section("acceptance")
        for line in module.VERDICTS:
            terminalreporter.write_line(line)
