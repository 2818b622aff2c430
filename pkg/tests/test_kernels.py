import math
import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from rmbfilter import (
    BrownianKernel,
    DomainError,
    FiniteChainKernel,
    OrnsteinUhlenbeckKernel,
    QuadratureWarning,
    UnsupportedOperationError,
    ck_residual,
)
from rmbfilter.errors import ConstructionError
from rmbfilter.kernels import density, score

from helpers import random_generator


class TestDensity:
    def test_standard_gaussian_peak(self, brownian):
        assert density(brownian, 1.0, 0.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)

    def test_brownian_half(self, brownian):
        expected = (2 * math.pi * 0.5) ** -0.5 * math.exp(-0.09)
        assert density(brownian, 0.5, 0.3, 0.0) == pytest.approx(expected, rel=1e-14)
        assert density(brownian, 0.5, 0.3, 0.0) == pytest.approx(0.5156305, abs=1e-7)

    def test_chain_stay_entry(self, chain2):
        assert density(chain2, 0.5, 0, 0) == pytest.approx((1 + math.exp(-1)) / 2, rel=1e-14)
        assert density(chain2, 0.5, 0, 0) == pytest.approx(0.6839397, abs=1e-7)

    def test_correlated_brownian_matches_scipy(self):
        vol = np.array([[1.0, 0.0], [0.6, 0.8]])
        k = BrownianKernel(drift=[0.2, -0.1], vol=vol, horizon=2.0)
        x, y = np.array([0.3, -0.4]), np.array([1.0, 0.5])
        ref = multivariate_normal(x + 0.7 * np.array([0.2, -0.1]), vol @ vol.T * 0.7).pdf(y)
        assert k.density(0.7, x, y) == pytest.approx(ref, rel=1e-12)

    def test_ou_matches_closed_form(self, ou):
        t, x, y = 0.4, 0.8, -0.3
        var = (1 - math.exp(-2 * t)) / 2
        assert ou.density(t, x, y) == pytest.approx(norm(x * math.exp(-t), math.sqrt(var)).pdf(y), rel=1e-12)

    @pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
    def test_time_outside_horizon(self, brownian, t):
        with pytest.raises(DomainError):
            brownian.density(t, 0.0, 0.0)

    def test_positive(self, brownian, ou, rng):
        for k in (brownian, ou):
            t = rng.uniform(1e-3, 1.0, 10_000)
            x, y = rng.uniform(-3, 3, (2, 10_000, 1))
            for i in range(0, 10_000, 500):
                # positivity lives in log space; small t underflows exp()
                assert np.all(np.isfinite(k.log_density(t[i], x[i:i + 500], y[i:i + 500])))
                if t[i] > 0.1:
                    assert np.all(k.density(t[i], x[i:i + 500], y[i:i + 500]) > 0)
        chain = FiniteChainKernel(random_generator(4, rng))
        assert np.all(chain.transition_matrix(0.01) > 0)

    def test_chain_rows_sum_to_one(self, rng):
        chain = FiniteChainKernel(random_generator(5, rng), horizon=3.0)
        for t in (0.01, 0.5, 3.0):
            np.testing.assert_allclose(chain.transition_matrix(t).sum(axis=1), 1.0, atol=1e-12)

    def test_integrates_to_one(self, brownian, ou):
        from rmbfilter.statespace import gauss_legendre_box
        ys, w = gauss_legendre_box(256, [(-15, 15)])
        for k in (brownian, ou):
            for t in (0.05, 0.5, 1.0):
                assert abs(np.sum(w * k.density(t, 0.4, ys)) - 1) < 1e-6


class TestGenerator:
    @pytest.mark.parametrize("Q", [[[-1, 1], [1, -2]], [[1, -1], [1, -1]], [[-1, 1, 0], [0, 0, 0], [0, 1, -1]]])
    def test_invalid(self, Q):
        with pytest.raises(ConstructionError):
            FiniteChainKernel(Q)


class TestScore:
    def test_examples(self, brownian):
        assert score(brownian, 1.0, 0.0, 0.0) == pytest.approx([0.0])
        assert score(brownian, 0.5, 0.0, 1.0) == pytest.approx([2.0])

    def test_chain_has_no_score(self, chain2):
        with pytest.raises(UnsupportedOperationError):
            score(chain2, 0.5, 0, 1)

    def test_ou_finite_difference(self):
        k = OrnsteinUhlenbeckKernel(theta=1.7, mu=0.4, sigma=0.6, horizon=2.0)
        h = 1e-6
        for t, x, y in [(0.3, 0.1, -0.5), (1.2, 2.0, 0.7)]:
            fd = (k.log_density(t, x + h, y) - k.log_density(t, x - h, y)) / (2 * h)
            assert k.score(t, x, y)[0] == pytest.approx(fd, rel=1e-6)

    def test_vector_finite_difference(self):
        vol = np.array([[0.5, 0.1], [0.0, 0.9]])
        k = BrownianKernel(drift=[0.3, 0.0], vol=vol)
        x, y = np.array([0.2, -0.1]), np.array([-0.4, 0.6])
        h = 1e-6
        fd = [(k.log_density(0.6, x + h * e, y) - k.log_density(0.6, x - h * e, y)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(k.score(0.6, x, y), fd, rtol=1e-6)


def test_backward_equation():
    # d/dt p = b(x) d/dx p + 0.5 sigma^2 d2/dx2 p
    k = OrnsteinUhlenbeckKernel(theta=0.8, mu=0.5, sigma=1.3, horizon=2.0)
    h, dt = 1e-4, 1e-5
    for t, x, y in [(0.3, 0.2, 0.9), (1.0, -1.0, 0.0), (0.7, 1.5, 1.2)]:
        p = lambda t, x: k.density(t, x, y)
        dpdt = (p(t + dt, x) - p(t - dt, x)) / (2 * dt)
        dpdx = (p(t, x + h) - p(t, x - h)) / (2 * h)
        d2 = (p(t, x + h) - 2 * p(t, x) + p(t, x - h)) / h**2
        rhs = k.drift(np.array([x]))[0] * dpdx + 0.5 * 1.3**2 * d2
        assert dpdt == pytest.approx(rhs, rel=1e-3)


class TestSampling:
    def test_brownian_mean(self, brownian):
        rng = np.random.default_rng(1)
        draws = np.array([brownian.sample_step(1.0, 0.0, rng) for _ in range(100)])
        assert draws.shape == (100, 1)
        draws = brownian.sample_step(1.0, np.zeros((100_000, 1)), rng)
        assert abs(draws.mean()) < 4 / math.sqrt(1e5)

    def test_drifted_mean(self):
        k = BrownianKernel(drift=1.0, vol=1.0)
        draws = k.sample_step(0.25, np.zeros((100_000, 1)), np.random.default_rng(2))
        assert abs(draws.mean() - 0.25) < 4 * 0.5 / math.sqrt(1e5)

    def test_chain_stationary(self):
        k = FiniteChainKernel([[-1.0, 1.0], [1.0, -1.0]], horizon=50.0)
        draws = k.sample_step(50.0, np.zeros(10_000, dtype=int), np.random.default_rng(3))
        assert abs(np.mean(draws == 0) - 0.5) < 0.01


class TestChapmanKolmogorov:
    def test_chain(self, rng):
        k = FiniteChainKernel(random_generator(4, rng), horizon=2.0)
        for _ in range(20):
            s, t = rng.uniform(0.01, 1.0, 2)
            x, z = rng.integers(0, 4, 2)
            assert ck_residual(k, s, t, x, z) <= 1e-12

    def test_brownian(self, brownian):
        with warnings.catch_warnings():
            warnings.simplefilter("error", QuadratureWarning)
            assert ck_residual(brownian, 0.5, 0.5, 0.0, 0.0, 256, box=[-10, 10]) <= 1e-8

    def test_ou(self, ou):
        assert ck_residual(ou, 0.3, 0.2, 0.1, -0.2, 256) <= 1e-8

    def test_narrow_box_warns(self, brownian):
        with pytest.warns(QuadratureWarning):
            ck_residual(brownian, 0.5, 0.5, 0.0, 0.0, 64, box=[-1, 1])
