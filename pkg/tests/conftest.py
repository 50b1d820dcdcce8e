import numpy as np
import pytest
from hypothesis import settings

from slicevol.phantom import PhantomParams, generate_cohort

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def cohort16():
    """Twelve default phantoms at 16^3."""
    return generate_cohort(PhantomParams(dims=(16, 16, 16), seed=1), 12)


@pytest.fixture(scope="session")
def phantom32():
    return generate_cohort(PhantomParams(dims=(32, 32, 32), seed=5), 1)[0]


class ZeroRng:
    """Stand-in generator whose normal draws are all zero."""

    def standard_normal(self, size=None):
        return np.zeros(size)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
