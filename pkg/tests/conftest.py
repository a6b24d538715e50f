import numpy as np
import pytest

from ukan import tensor as T


@pytest.fixture(autouse=True)
def _clean_runtime():
    """Every test starts and ends with float64, a clear tape, and traps off."""
    T.set_default_dtype("float64")
    T.set_debug_nonfinite(False)
    T.clear_graph()
    yield
    T.clear_graph()
    T.set_debug_nonfinite(False)
    T.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
