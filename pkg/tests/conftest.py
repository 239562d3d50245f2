import numpy as np
import pytest

from retinareg import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure steady state."""
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
