import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from delaycarto.covmodel import ModelParams
from delaycarto.topology import chain_network, random_network


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def chain():
    return chain_network()


@pytest.fixture(scope="session")
def small_net():
    return random_network(8, 5, 10, seed=3)


@pytest.fixture(scope="session")
def small_params(small_net):
    return ModelParams.from_gramian(2.0, small_net.gram, 0.5, 1e-3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
