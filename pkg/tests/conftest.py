import numpy as np
import pytest

from advcompose.classifier import ConvNet, TrainConfig, train
from advcompose.imagecore import synth_dataset

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def train_set():
    return synth_dataset(1, 200, 16)


@pytest.fixture(scope="session")
def test_set():
    return synth_dataset(2, 100, 16)


@pytest.fixture(scope="session")
def trained_net(train_set):
    net = ConvNet(seed=0)
    train(net, train_set, TrainConfig(epochs=20, learning_rate=0.05, seed=0))
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
