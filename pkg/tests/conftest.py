import numpy as np
import pytest

from hazeprior.tensor import set_finite_checks


@pytest.fixture(autouse=True)
def _finite_checks():
    """Scan every op output for NaN/Inf throughout the suite."""
    set_finite_checks(True)
    yield
    set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
