import math

import numpy as np
import pytest

from rmbfilter import (
    BridgeSpec,
    BrownianKernel,
    DomainError,
    FilterInput,
    FiniteChainKernel,
    NumericError,
    OrnsteinUhlenbeckKernel,
    bridge_transition_density,
    expectation,
    make_atomic_prior,
    posterior,
    price,
    rmb_ck_residual,
    rmb_transition_density,
    simulate,
    terminal_limit_gap,
    uniform_grid,
    unnormalized_posterior,
)
from rmbfilter.bridge import likelihood_ratio
from rmbfilter.filter import mixture_transition_density, posterior_weights

from helpers import random_generator

P_PLUS = 1 / (1 + math.exp(-1.2))


class TestPosterior:
    def test_symmetric(self, brownian, two_point):
        post = posterior(FilterInput(brownian, two_point, 0.0, 0.5, 0.0))
        np.testing.assert_allclose(post.weights, [0.5, 0.5], atol=1e-15)

    def test_asymmetric(self, brownian, two_point):
        post = posterior(FilterInput(brownian, two_point, 0.0, 0.5, 0.3))
        assert post.mass_at(1.0) == pytest.approx(P_PLUS, rel=1e-13)
        assert post.mass_at(1.0) == pytest.approx(0.768525, abs=1e-6)

    def test_unnormalized_ratio(self, brownian, two_point):
        w = unnormalized_posterior(FilterInput(brownian, two_point, 0.0, 0.5, 0.3)).weights
        assert w[1] / w[0] == pytest.approx(math.exp(0.01) / math.exp(-1.19), rel=1e-13)

    def test_degenerate_unnormalized_is_likelihood_ratio(self, ou):
        prior = make_atomic_prior([0.6])
        w = unnormalized_posterior(FilterInput(ou, prior, 0.1, 0.4, -0.3)).weights
        assert w[0] == pytest.approx(likelihood_ratio(BridgeSpec(ou, 0.1, 0.6), 0.4, -0.3), rel=1e-13)

    def test_time_zero_is_prior(self, rng):
        chain = FiniteChainKernel(random_generator(3, rng))
        prior = make_atomic_prior([0, 2], [0.3, 0.7], chain.space)
        assert np.array_equal(posterior(FilterInput(chain, prior, 1, 0.0, 1)).weights, prior.weights)

    def test_time_zero_needs_matching_observation(self, brownian, two_point):
        with pytest.raises(DomainError):
            unnormalized_posterior(FilterInput(brownian, two_point, 0.0, 0.0, 0.5))

    def test_at_horizon(self, brownian, two_point):
        with pytest.raises(DomainError):
            FilterInput(brownian, two_point, 0.0, 1.0, 0.0)

    def test_extreme_observation_stays_normalized(self, brownian, two_point):
        post = posterior(FilterInput(brownian, two_point, 0.0, 1 - 1e-8, 0.9))
        assert post.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert post.mass_at(1.0) == 1.0

    def test_total_underflow(self):
        k = BrownianKernel(vol=1e-3)
        prior = make_atomic_prior([-1.0, 1.0])
        with pytest.raises(NumericError):
            unnormalized_posterior(FilterInput(k, prior, 0.0, 0.9999, 50.0))

    def test_weights_are_a_martingale(self, brownian):
        prior = make_atomic_prior([-1.0, 0.5, 2.0], [0.2, 0.5, 0.3])
        spec = BridgeSpec(brownian, 0.0, prior)
        path = simulate(spec, uniform_grid(1.0, 10, 0.1), 40_000, seed=21)
        w = posterior_weights(brownian, prior, 1.0, np.array([0.0]), path.grid[6], path.values[:, 6])
        se = w.std(axis=0) / math.sqrt(len(w))
        assert np.all(np.abs(w.mean(axis=0) - prior.weights) < 4 * se)

    def test_concentration(self, brownian, two_point):
        path = simulate(BridgeSpec(brownian, 0.0, two_point), uniform_grid(1.0, 100, 1e-4), 1_000, seed=5)
        w = posterior_weights(brownian, two_point, 1.0, np.array([0.0]), path.grid[-1], path.values[:, -1])
        truth = (path.hidden_pin[:, 0] == 1.0).astype(int)
        assert np.mean(w[np.arange(len(w)), truth]) > 0.99


class TestPrice:
    def test_example(self, brownian, two_point):
        inp = FilterInput(brownian, two_point, 0.0, 0.5, 0.3)
        assert price(inp, lambda x: x) == pytest.approx(2 * P_PLUS - 1, rel=1e-12)
        assert price(inp, lambda x: x) == pytest.approx(0.537050, abs=1e-6)

    def test_undiscounted_is_expectation(self, ou):
        prior = make_atomic_prior([-1.0, 0.2, 1.5], [1, 2, 1])
        inp = FilterInput(ou, prior, 0.0, 0.3, 0.4)
        assert price(inp, np.exp) == expectation(posterior(inp), np.exp)

    def test_degenerate(self, brownian):
        inp = FilterInput(brownian, make_atomic_prior([1.3]), 0.0, 0.25, -2.0)
        assert price(inp, lambda x: x * x, rate=0.05) == pytest.approx(math.exp(-0.05 * 0.75) * 1.69, rel=1e-14)

    def test_negative_rate(self, brownian, two_point):
        with pytest.raises(DomainError):
            price(FilterInput(brownian, two_point, 0.0, 0.5, 0.3), lambda x: x, rate=-0.1)


class TestTransitionDensity:
    def test_matches_mixture_on_chain(self, rng):
        chain = FiniteChainKernel(random_generator(4, rng))
        prior = make_atomic_prior([0, 1, 3], [0.2, 0.5, 0.3], chain.space)
        for _ in range(20):
            s, t = np.sort(rng.uniform(0, 0.99, 2))
            x, y, z0 = rng.integers(0, 4, 3)
            q = rmb_transition_density(chain, prior, z0, 1.0, s, x, t, y)
            assert q == pytest.approx(mixture_transition_density(chain, prior, z0, 1.0, s, x, t, y), rel=1e-12)

    def test_matches_mixture_on_diffusion(self, ou, two_point):
        q = rmb_transition_density(ou, two_point, 0.2, 1.0, 0.3, 0.1, 0.7, -0.4)
        assert q == pytest.approx(mixture_transition_density(ou, two_point, 0.2, 1.0, 0.3, 0.1, 0.7, -0.4), rel=1e-12)

    def test_degenerate_is_bridge(self, brownian):
        prior = make_atomic_prior([0.8])
        q = rmb_transition_density(brownian, prior, 0.0, 1.0, 0.2, 0.1, 0.6, 0.5)
        ref = bridge_transition_density(BridgeSpec(brownian, 0.0, 0.8), 0.2, 0.1, 0.6, 0.5)
        assert q == pytest.approx(ref, rel=1e-13)

    def test_chain_rows_sum_to_one(self, rng):
        chain = FiniteChainKernel(random_generator(5, rng))
        prior = make_atomic_prior([1, 4], space=chain.space)
        q = rmb_transition_density(chain, prior, 2, 1.0, 0.3, 0, 0.8, np.arange(5))
        assert q.sum() == pytest.approx(1.0, abs=1e-12)


class TestRmbChapmanKolmogorov:
    def test_chain(self, rng):
        chain = FiniteChainKernel(random_generator(3, rng))
        prior = make_atomic_prior([0, 2], [0.4, 0.6], chain.space)
        assert rmb_ck_residual(chain, prior, 1, 0.2, 0.5, 0.9, 0, 2) <= 1e-10

    def test_brownian_two_point(self, brownian, two_point):
        assert rmb_ck_residual(brownian, two_point, 0.0, 0.1, 0.4, 0.8, 0.2, -0.3) <= 1e-7

    def test_degenerate(self, ou):
        assert rmb_ck_residual(ou, make_atomic_prior([0.3]), 0.0, 0.2, 0.5, 0.7, 0.0, 0.1) <= 1e-8


class TestTerminalLimit:
    def test_degenerate_is_zero(self, brownian):
        prior = make_atomic_prior([0.4])
        for t in (0.9, 0.99, 1 - 1e-6):
            assert terminal_limit_gap(brownian, prior, 0.0, 0.3, 0.1, t) <= 1e-15

    def test_gap_shrinks(self, brownian, two_point):
        gaps = [terminal_limit_gap(brownian, two_point, 0.0, 0.5, 0.3, 1 - e) for e in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] <= 1e-3

    def test_chain(self, rng):
        chain = FiniteChainKernel(random_generator(3, rng))
        prior = make_atomic_prior([0, 1], [0.5, 0.5], chain.space)
        assert terminal_limit_gap(chain, prior, 2, 0.3, 1, 1 - 1e-6) <= 1e-4

    def test_overlapping_windows(self, brownian):
        prior = make_atomic_prior([0.0, 0.01])
        with pytest.raises(DomainError):
            terminal_limit_gap(brownian, prior, 0.0, 0.3, 0.1, 0.9, window_constant=0.1)

    def test_ou(self):
        k = OrnsteinUhlenbeckKernel(theta=1.5, mu=0.2, sigma=0.8)
        prior = make_atomic_prior([-1.0, 0.5, 1.5], [1, 1, 2])
        assert terminal_limit_gap(k, prior, 0.0, 0.4, 0.6, 1 - 1e-6) <= 1e-3
