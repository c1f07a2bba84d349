import numpy as np
import pytest

from intentlab.game import toy_benchmark
from intentlab.model import ToySpec, train_toy_model

TWO_BLOBS = ToySpec(dim=8, n_classes=2)
SMALL = ToySpec(dim=16, n_classes=4)


@pytest.fixture(scope="session")
def bench():
    """The d=32, 10-class benchmark every game test plays on."""
    return toy_benchmark()


@pytest.fixture(scope="session")
def two_blob_result():
    return train_toy_model(TWO_BLOBS, seed=0)


@pytest.fixture(scope="session")
def small_result():
    return train_toy_model(SMALL, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(RESULTS):
        terminalreporter.write_line(line)
