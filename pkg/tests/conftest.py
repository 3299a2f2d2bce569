import numpy as np
import pytest

from aftgof.data import SurvivalDataset
from aftgof.simulate import ScenarioConfig, generate


def random_dataset(rng, n, p, censor=0.3, ties=False):
    z = rng.normal(size=(n, p))
    if ties:
        z = np.round(z)
    t = np.exp(rng.normal(size=n) - z.sum(axis=1))
    if ties:
        t = np.round(t, 1) + 0.1
    status = (rng.random(n) > censor).astype(float)
    status[0] = 1.0
    return SurvivalDataset(t, status, z)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def s1_null():
    return generate(ScenarioConfig("S1", 120, 0.0, 0.2, seed=7))


@pytest.fixture(scope="session")
def s2_null():
    return generate(ScenarioConfig("S2", 120, 0.0, 0.2, seed=8))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
