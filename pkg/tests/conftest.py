import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cafda import simgen
from cafda.famm import ModelSpec
from cafda.pipeline import train

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dgp():
    return simgen.DgpConfig()


@pytest.fixture(scope="session")
def fixture_data(dgp):
    """The simulated training set (J=300, hourly points) with its truth."""
    return simgen.generate_phase1(dgp, return_truth=True)


@pytest.fixture(scope="session")
def fixture_model(fixture_data):
    ds, _ = fixture_data
    return train(ModelSpec(simgen.BASIC_SPEC), ds)


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)
