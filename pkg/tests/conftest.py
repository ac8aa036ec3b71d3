import numpy as np
import pytest

from magsat.model import PlantParams, build_plant
from magsat.synthesis import LqrWeights


@pytest.fixture(scope="session")
def params():
    return PlantParams()


@pytest.fixture(scope="session")
def plant(params):
    return build_plant(params)


@pytest.fixture(scope="session")
def weights(plant):
    return LqrWeights.reference(plant)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_contraction(rng, plant, sigma_max=0.99):
    """Gain whose closed loop ``A - BK`` has singular values uniform in [0, sigma_max)."""
    q1, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    q2, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    M = q1 @ np.diag(rng.uniform(0.0, sigma_max, 2)) @ q2
    return np.linalg.solve(plant.B, plant.A - M)


def random_disk_point(rng, radius):
    r = radius * np.sqrt(rng.random())
    a = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([r * np.cos(a), r * np.sin(a)])


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
