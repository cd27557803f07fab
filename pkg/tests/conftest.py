import numpy as np
import pytest
from hypothesis import settings

from heatbeam.grid import RectGrid
from heatbeam.weights import ObservationRegions

settings.register_profile("heatbeam", deadline=None, max_examples=25)
settings.load_profile("heatbeam")


@pytest.fixture
def grid():
    return RectGrid.uniform(64, 33)


@pytest.fixture
def small_grid():
    return RectGrid.uniform(16, 9)


@pytest.fixture
def regions():
    return ObservationRegions.default()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
