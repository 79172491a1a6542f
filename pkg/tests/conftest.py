import numpy as np
import pytest

from egat.data import synthetic_dataset
from egat.model import ConvClassifier


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    # 121 parameters
    return ConvClassifier(2, widths=(2, 3), dropout_rate=0.0, seed=3)


@pytest.fixture
def tiny_batch():
    r = np.random.default_rng(7)
    return r.uniform(0.05, 0.95, size=(3, 3, 8, 8)), np.array([0, 1, 1])


@pytest.fixture(scope="session")
def small_ds():
    return synthetic_dataset(60, 3, ["flat", "stripes"], seed=5)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
