import numpy as np
import pytest
from hypothesis import settings

from settlers.dynamics import RotationCurve, generate_catalog

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def flat():
    return RotationCurve.flat()


@pytest.fixture(scope="session")
def wavy():
    """A non-flat curve with speed rising then falling over [2, 32] kpc."""
    return RotationCurve((4.6, -0.05, 0.002, 0, 0, 0, 0, 0, 0))


@pytest.fixture(scope="session")
def small_catalog():
    return generate_catalog(400, 11, "planar")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
