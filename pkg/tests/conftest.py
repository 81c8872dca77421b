import numpy as np
import pytest

from aggmark.synthetic import (
    disability_model,
    flat_chain,
    free_policy_model,
    general_two_state_model,
)


@pytest.fixture(scope="session")
def disability2():
    return disability_model(2)


@pytest.fixture(scope="session")
def disability1():
    return disability_model(1)


@pytest.fixture(scope="session")
def chain():
    return flat_chain()


@pytest.fixture(scope="session")
def general_model():
    return general_two_state_model()


@pytest.fixture(scope="session")
def free_policy():
    return free_policy_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
