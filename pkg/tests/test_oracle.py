import numpy as np
import pytest

from rmbfilter import (
    BridgeSpec,
    DomainError,
    FilterInput,
    FiniteChainKernel,
    NumericError,
    make_atomic_prior,
    posterior,
    simulate,
    uniform_grid,
)
from rmbfilter.oracle import abc_posterior, compare, telescoping_posterior

from helpers import random_generator


def test_single_observation(ou, two_point):
    tele = telescoping_posterior(ou, two_point, [(0.0, 0.1), (0.4, -0.3)])
    closed = posterior(FilterInput(ou, two_point, 0.1, 0.4, -0.3))
    np.testing.assert_allclose(tele.weights, closed.weights, rtol=0, atol=1e-12)


def test_chain_fifty_observations(rng):
    chain = FiniteChainKernel(random_generator(3, rng))
    prior = make_atomic_prior([0, 1, 2], [0.5, 0.3, 0.2], chain.space)
    path = simulate(BridgeSpec(chain, 0, prior), uniform_grid(1.0, 50), 5, seed=1)
    for p in range(5):
        obs = list(zip(path.grid, path.values[p]))
        tele = telescoping_posterior(chain, prior, obs)
        closed = posterior(FilterInput(chain, prior, obs[0][1], obs[-1][0], obs[-1][1]))
        np.testing.assert_allclose(tele.weights, closed.weights, rtol=1e-10)


def test_brownian_hundred_observations(brownian, two_point):
    path = simulate(BridgeSpec(brownian, 0.0, two_point), uniform_grid(1.0, 100, 1e-3), 5, seed=2)
    for p in range(5):
        obs = list(zip(path.grid, path.values[p]))
        tele = telescoping_posterior(brownian, two_point, obs)
        closed = posterior(FilterInput(brownian, two_point, 0.0, path.grid[-1], path.values[p, -1]))
        assert compare(tele, closed) <= 1e-9


def test_thinning_invariance(ou, two_point):
    path = simulate(BridgeSpec(ou, 0.0, two_point), uniform_grid(1.0, 100, 1e-2), 3, seed=3)
    for p in range(3):
        obs = list(zip(path.grid, path.values[p]))
        full = telescoping_posterior(ou, two_point, obs)
        thin = telescoping_posterior(ou, two_point, obs[::10] + [obs[-1]] if len(obs) % 10 != 1 else obs[::10])
        assert compare(full, thin) <= 1e-12


def test_bad_observations(brownian, two_point):
    with pytest.raises(DomainError):
        telescoping_posterior(brownian, two_point, [(0.1, 0.0), (0.5, 0.0)])
    with pytest.raises(DomainError):
        telescoping_posterior(brownian, two_point, [(0.0, 0.0), (0.5, 0.0), (0.5, 0.1)])


class TestAbc:
    def test_asymmetric(self, brownian, two_point):
        est = abc_posterior(brownian, two_point, 0.0, 1.0, 0.5, 0.3, 0.02, 1_000_000, seed=1, workers=4)
        closed = posterior(FilterInput(brownian, two_point, 0.0, 0.5, 0.3))
        assert compare(est.posterior, closed) <= 0.05

    def test_symmetric(self, brownian, two_point):
        est = abc_posterior(brownian, two_point, 0.0, 1.0, 0.5, 0.0, 0.02, 200_000, seed=2)
        assert abs(est.posterior.mass_at(1.0) - 0.5) <= 0.05

    def test_degenerate(self, brownian):
        prior = make_atomic_prior([0.4])
        est = abc_posterior(brownian, prior, 0.0, 1.0, 0.5, 0.1, 0.05, 20_000, seed=3)
        assert est.posterior.weights.tolist() == [1.0]

    def test_too_few_accepted(self, brownian, two_point):
        with pytest.raises(NumericError):
            abc_posterior(brownian, two_point, 0.0, 1.0, 0.5, 0.3, 1e-6, 1000)

    def test_worker_independent(self, brownian, two_point):
        a = abc_posterior(brownian, two_point, 0.0, 1.0, 0.5, 0.3, 0.05, 30_000, seed=4, block_size=10_000)
        b = abc_posterior(brownian, two_point, 0.0, 1.0, 0.5, 0.3, 0.05, 30_000, seed=4, workers=3,
                          block_size=10_000)
        assert a.accepted == b.accepted and np.array_equal(a.posterior.weights, b.posterior.weights)


def test_compare_identity(two_point):
    post = posterior(FilterInput(FiniteChainKernel([[-1, 1], [1, -1]]),
                                 make_atomic_prior([0, 1], space=FiniteChainKernel([[-1, 1], [1, -1]]).space),
                                 0, 0.3, 1))
    assert compare(post, post) == 0.0
