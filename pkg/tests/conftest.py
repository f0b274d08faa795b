import sys

import numpy as np
import pytest

from handleforge.mesh import icosphere


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def sphere():
    return icosphere(1)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(acceptance.RESULTS, key=lambda k: (int(str(k).rstrip("abc")), str(k))):
        terminalreporter.write_line(acceptance.RESULTS[key])
