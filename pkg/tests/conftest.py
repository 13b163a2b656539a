import numpy as np
import pytest
from hypothesis import settings

from brwre.env import Environment, EnvironmentSpec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

BIG_CAP = 10**8


@pytest.fixture(scope="session")
def preset_spec():
    return EnvironmentSpec.two_point(0.5, 1.5, 0.5, seed=2024)


@pytest.fixture(scope="session")
def preset_env(preset_spec):
    return Environment(preset_spec)


@pytest.fixture(scope="session")
def const1():
    return Environment(EnvironmentSpec.constant(1.0))


def stream(*parts):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(parts))))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
