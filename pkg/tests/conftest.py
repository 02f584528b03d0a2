import numpy as np
import pytest

from pfas.channel import ArrayGeometry, GridModel, make_grid
from pfas.patterns import synth_pattern_set


@pytest.fixture(scope="session")
def grid15():
    return make_grid(15)


@pytest.fixture(scope="session")
def geom44():
    return ArrayGeometry(4, 4)


@pytest.fixture(scope="session")
def model15(grid15, geom44):
    return GridModel(grid15, synth_pattern_set(7, 12, 3), geom44)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get(
        "tests.test_acceptance"
    )
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
