import numpy as np
import pytest

from accentconv.autodiff import default_dtype


@pytest.fixture
def f64():
    """Run the test with float64 tensors (needed for finite-difference checks)."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
