import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cvsi import NoiseSchedule, generate_random_gmm
from cvsi.targets import GaussianMixture

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def vp():
    return NoiseSchedule("vp-linear")


@pytest.fixture(scope="session")
def gmm2d():
    return generate_random_gmm(6, 2, seed=3)


@pytest.fixture(scope="session")
def two_comp():
    return GaussianMixture(
        [0.4, 0.6],
        [[-2.0, 0.0], [2.0, 1.0]],
        [[[1.0, 0.3], [0.3, 0.5]], [[0.6, -0.2], [-0.2, 1.2]]],
    )
