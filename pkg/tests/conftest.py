import numpy as np
import pytest

from scd import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run a test in 64-bit verification precision."""
    prev = T.get_precision()
    T.set_precision("f64")
    yield
    T.set_precision(prev)
