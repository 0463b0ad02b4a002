import numpy as np
import pytest

from galboost import hpz, oracle
from galboost.core import GaussianState, SpectralDensity, SystemParams, discretize

KT = 10.0


def reference_model(n_modes=256, gamma=0.05, omega=1.0, R0=0.0):
    spec = SpectralDensity("OhmicDrude", gamma, 10.0, 1.0, 80.0)
    return oracle.CompositeModel(SystemParams(1.0, omega, R0), discretize(spec, n_modes, 1.0 / KT))


@pytest.fixture(scope="session")
def model():
    return reference_model()


@pytest.fixture(scope="session")
def grid():
    return 0.005 * np.arange(3001)  # t in [0, 15], inside the N = 256 recurrence time


@pytest.fixture(scope="session")
def prop(model, grid):
    return hpz.padded_propagation(model, grid)


@pytest.fixture(scope="session")
def trace(model, grid, prop):
    return hpz.extract_coefficients(model, hpz.default_initial_set(model.sys), grid, prop=prop)


@pytest.fixture(scope="session")
def sys0():
    return GaussianState.coherent(1.0, 0.0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
