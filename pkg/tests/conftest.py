import numpy as np
import pytest

from eqtrack import data
from eqtrack.steerable import ModelConfig, SteerableNet


@pytest.fixture(scope="session")
def subject16():
    return data.make_subject(0, 16)


@pytest.fixture(scope="session")
def subject32():
    return data.make_subject(0, 32)


@pytest.fixture(scope="session")
def desk_net():
    net = SteerableNet(ModelConfig.build(hidden={0: 4, 1: 4, 2: 2}, channels=16))
    return net, net.init_params()


@pytest.fixture(scope="session")
def tiny_net():
    net = SteerableNet(ModelConfig.build(hidden={0: 2, 1: 2, 2: 1}, n_layers=3, channels=8, kernel=3))
    return net, net.init_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when the acceptance module ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
