import numpy as np
import pytest

from rmbfilter import BrownianKernel, FiniteChainKernel, OrnsteinUhlenbeckKernel, make_atomic_prior


@pytest.fixture
def brownian():
    return BrownianKernel(0.0, 1.0, horizon=1.0)


@pytest.fixture
def ou():
    return OrnsteinUhlenbeckKernel(theta=1.0, mu=0.0, sigma=1.0, horizon=1.0)


@pytest.fixture
def chain2():
    return FiniteChainKernel([[-1.0, 1.0], [1.0, -1.0]], horizon=1.0)


@pytest.fixture
def two_point():
    return make_atomic_prior([-1.0, 1.0], [1, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
