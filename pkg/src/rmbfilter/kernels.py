"""Transition-density kernels p_t(x, y) of time-homogeneous Markov processes.

Three kernels with closed-form densities are provided: constant-coefficient
Brownian motion in R^n, the scalar Ornstein-Uhlenbeck process and finite
continuous-time Markov chains.  The two diffusions share the linear-Gaussian
machinery of :class:`GaussianKernel`.

Densities broadcast over states.  Continuum states have a trailing axis of
length n, finite states are integer indices.
"""

from __future__ import annotations

import threading
import warnings
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components
from scipy.stats import norm

from .errors import (
    ConstructionError,
    DomainError,
    NumericError,
    QuadratureWarning,
    UnsupportedOperationError,
)
from .statespace import StateSpace, gauss_legendre_box

LOG_2PI = np.log(2.0 * np.pi)

#: half-width of default quadrature boxes, in standard deviations
BOX_SDS = 12.0
#: minimum Gaussian mass a quadrature box must carry
BOX_MASS = 1.0 - 1e-10


class TransitionKernel:
    """Base class: a transition density with respect to the space's reference measure."""

    is_diffusion = False
    kind = "abstract"

    def __init__(self, space: StateSpace, horizon: float = 1.0):
        if not np.isfinite(horizon) or horizon <= 0:
            raise ConstructionError(f"horizon must be positive, got {horizon}")
        self.space = space
        self.horizon = float(horizon)

    @property
    def dimension(self) -> int:
        return self.space.dimension

    def check_time(self, t: float) -> float:
        t = float(t)
        if not (t > 0 and t <= self.horizon * (1 + 1e-12)):
            raise DomainError(f"time {t} outside (0, {self.horizon}]")
        return t

    def log_density(self, t, x, y):
        raise NotImplementedError

    def density(self, t, x, y):
        """p_t(x, y); evaluated as exp(log_density)."""
        out = np.exp(self.log_density(t, x, y))
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite density at t={t}")
        return out

    def sample_step(self, t, x, rng: np.random.Generator):
        raise NotImplementedError

    def score(self, t, x, y):
        raise UnsupportedOperationError(f"{type(self).__name__} is not a diffusion kernel")

    def drift(self, x):
        raise UnsupportedOperationError(f"{type(self).__name__} is not a diffusion kernel")

    def sigma(self, x):
        raise UnsupportedOperationError(f"{type(self).__name__} is not a diffusion kernel")

    def with_horizon(self, horizon: float) -> "TransitionKernel":
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "horizon": self.horizon}


class GaussianKernel(TransitionKernel):
    """Diffusion whose law at time t given x is N(A_t x + c_t, V_t)."""

    is_diffusion = True

    def moments(self, t):
        """Return (A_t, c_t, V_t) as arrays of shape (n, n), (n,), (n, n)."""
        raise NotImplementedError

    @staticmethod
    def _vec(a) -> np.ndarray:
        # a bare scalar is a state of the one-dimensional space
        a = np.asarray(a, dtype=float)
        return a.reshape(1) if a.ndim == 0 else a

    def _factors(self, t):
        A, c, V = self.moments(t)
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"transition covariance is not positive definite at t={t}") from exc
        Vinv = np.linalg.inv(V)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return A, c, V, L, Vinv, logdet

    def log_density(self, t, x, y):
        t = self.check_time(t)
        A, c, _, _, Vinv, logdet = self._factors(t)
        x, y = self._vec(x), self._vec(y)
        r = y - (x @ A.T + c)
        quad = np.einsum("...i,ij,...j->...", r, Vinv, r)
        return -0.5 * (quad + logdet + self.dimension * LOG_2PI)

    def score(self, t, x, y):
        """Gradient of log p_t(x, y) in the first argument x."""
        t = self.check_time(t)
        A, c, _, _, Vinv, _ = self._factors(t)
        x, y = self._vec(x), self._vec(y)
        r = y - (x @ A.T + c)
        return r @ (Vinv @ A)

    def transform_noise(self, t, x, normals):
        """Deterministic map from standard normals to a draw from p_t(x, .)."""
        t = self.check_time(t)
        A, c, _, L, _, _ = self._factors(t)
        return self._vec(x) @ A.T + c + self._vec(normals) @ L.T

    def sample_step(self, t, x, rng: np.random.Generator):
        x = self._vec(x)
        return self.transform_noise(t, x, rng.standard_normal(x.shape))

    def bridge_moments(self, t1, t2, x, z):
        """Mean and covariance of Y_{t1} given Y_0 = x and Y_{t1+t2} = z.

        `x` and `z` may carry leading batch axes; the covariance does not
        depend on them.
        """
        A1, c1, _, _, V1inv, _ = self._factors(t1)
        A2, c2, _, _, V2inv, _ = self._factors(t2)
        prec = V1inv + A2.T @ V2inv @ A2
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        x, z = self._vec(x), self._vec(z)
        rhs = (x @ A1.T + c1) @ V1inv.T + (z - c2) @ (V2inv @ A2)
        return rhs @ cov.T, cov

    def diffusion_matrix(self, x):
        s = self.sigma(x)
        return np.einsum("...ij,...kj->...ik", s, s)


class BrownianKernel(GaussianKernel):
    """Brownian motion with constant drift vector mu and volatility matrix sigma."""

    kind = "brownian"

    def __init__(self, drift=0.0, vol=1.0, horizon: float = 1.0):
        mu = np.atleast_1d(np.asarray(drift, dtype=float))
        vol = np.asarray(vol, dtype=float)
        if vol.ndim == 0:
            vol = np.eye(len(mu)) * float(vol)
        elif vol.ndim == 1:
            vol = np.diag(vol)
        n = vol.shape[0]
        if mu.shape == (1,) and n > 1:
            mu = np.full(n, mu[0])
        if vol.shape != (n, n) or mu.shape != (n,):
            raise ConstructionError(f"drift {mu.shape} and volatility {vol.shape} shapes disagree")
        cov = vol @ vol.T
        if np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
            raise ConstructionError("sigma sigma^T must be positive definite")
        super().__init__(StateSpace.continuum(n), horizon)
        self.mu = mu
        self.vol = vol
        self._cov = cov

    def moments(self, t):
        n = self.dimension
        return np.eye(n), self.mu * t, self._cov * t

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.mu, x.shape).copy()

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        n = self.dimension
        return np.broadcast_to(self.vol, x.shape[:-1] + (n, n))

    def with_horizon(self, horizon):
        return BrownianKernel(self.mu, self.vol, horizon)

    def describe(self):
        return {"kind": self.kind, "horizon": self.horizon,
                "drift": self.mu.tolist(), "vol": self.vol.tolist()}


class OrnsteinUhlenbeckKernel(GaussianKernel):
    """Scalar OU process dY = theta (mu - Y) dt + sigma dW."""

    kind = "ou"

    def __init__(self, theta: float, mu: float = 0.0, sigma: float = 1.0, horizon: float = 1.0):
        if not theta > 0:
            raise ConstructionError(f"theta must be positive, got {theta}")
        if not sigma > 0:
            raise ConstructionError(f"sigma must be positive, got {sigma}")
        super().__init__(StateSpace.continuum(1), horizon)
        self.theta = float(theta)
        self.mu = float(mu)
        self.sig = float(sigma)

    def moments(self, t):
        decay = np.exp(-self.theta * t)
        var = self.sig**2 * (-np.expm1(-2.0 * self.theta * t)) / (2.0 * self.theta)
        return np.array([[decay]]), np.array([self.mu * (1.0 - decay)]), np.array([[var]])

    def drift(self, x):
        return self.theta * (self.mu - np.asarray(x, dtype=float))

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), self.sig)

    def with_horizon(self, horizon):
        return OrnsteinUhlenbeckKernel(self.theta, self.mu, self.sig, horizon)

    def describe(self):
        return {"kind": self.kind, "horizon": self.horizon,
                "theta": self.theta, "mu": self.mu, "sigma": self.sig}


class FiniteChainKernel(TransitionKernel):
    """Continuous-time Markov chain with generator Q; p_t = expm(t Q)."""

    kind = "finite_chain"

    def __init__(self, generator, horizon: float = 1.0, points=None):
        Q = np.asarray(generator, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] < 2:
            raise ConstructionError(f"generator must be a k x k matrix with k >= 2, got {Q.shape}")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0):
            raise ConstructionError("generator off-diagonal entries must be nonnegative")
        scale = max(1.0, float(np.abs(Q).max()))
        if np.any(np.abs(Q.sum(axis=1)) > 1e-12 * scale):
            raise ConstructionError("generator rows must sum to zero")
        n_comp, _ = connected_components(off > 0, directed=True, connection="strong")
        if n_comp != 1:
            raise ConstructionError("generator must be irreducible (densities must be positive)")
        k = Q.shape[0]
        super().__init__(StateSpace.finite(points if points is not None else range(k)), horizon)
        if self.space.size != k:
            raise ConstructionError(f"{self.space.size} labels for a {k}-state generator")
        self.Q = Q
        self._cache: dict[float, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def n_states(self) -> int:
        return self.Q.shape[0]

    def transition_matrix(self, t) -> np.ndarray:
        t = self.check_time(t)
        P = self._cache.get(t)
        if P is None:
            P = expm(t * self.Q)
            P.setflags(write=False)
            with self._lock:
                if len(self._cache) > 4096:
                    self._cache.clear()
                self._cache[t] = P
        return P

    def log_density(self, t, x, y):
        P = self.transition_matrix(t)
        vals = P[np.asarray(x, dtype=int), np.asarray(y, dtype=int)]
        if np.any(vals <= 0):
            raise NumericError(f"transition probability underflowed at t={t}")
        return np.log(vals)

    def density(self, t, x, y):
        P = self.transition_matrix(t)
        return P[np.asarray(x, dtype=int), np.asarray(y, dtype=int)]

    def sample_categorical(self, probs, uniforms):
        """Inverse-CDF sampling from rows of `probs` (not necessarily normalized)."""
        cdf = np.cumsum(probs, axis=-1)
        total = cdf[..., -1:]
        u = np.asarray(uniforms)[..., None] * total
        idx = (u >= cdf).sum(axis=-1)
        return np.minimum(idx, probs.shape[-1] - 1)

    def sample_step(self, t, x, rng: np.random.Generator):
        x = np.asarray(x, dtype=int)
        P = self.transition_matrix(t)
        return self.sample_categorical(P[x], rng.random(x.shape))

    def with_horizon(self, horizon):
        return FiniteChainKernel(self.Q, horizon, self.space.points)

    def describe(self):
        return {"kind": self.kind, "horizon": self.horizon, "generator": self.Q.tolist(),
                "points": list(self.space.points)}


def density(kernel: TransitionKernel, t, x, y):
    return kernel.density(t, x, y)


def log_density(kernel: TransitionKernel, t, x, y):
    return kernel.log_density(t, x, y)


def score(kernel: TransitionKernel, t, x, y):
    return kernel.score(t, x, y)


def sample_step(kernel: TransitionKernel, t, x, rng: np.random.Generator):
    return kernel.sample_step(t, x, rng)


def default_box(kernel: GaussianKernel, t1, t2, x, z, sds: float = BOX_SDS):
    """Box around the intermediate-point law of a bridge from x to z."""
    mean, cov = kernel.bridge_moments(t1, t2, x, z)
    sd = np.sqrt(np.diag(cov))
    return [(m - sds * s, m + sds * s) for m, s in zip(np.atleast_1d(mean).reshape(-1), sd)]


def box_coverage(kernel: GaussianKernel, t1, t2, x, z, box) -> float:
    """Gaussian mass of the intermediate-point law inside `box` (product of marginals)."""
    mean, cov = kernel.bridge_moments(t1, t2, x, z)
    sd = np.sqrt(np.diag(cov))
    mass = 1.0
    for (lo, hi), m, s in zip(box, np.atleast_1d(mean).reshape(-1), sd):
        mass *= norm.cdf(hi, m, s) - norm.cdf(lo, m, s)
    return float(mass)


def integration_rule(kernel: TransitionKernel, t1, t2, x, z, nodes: int = 256, box=None):
    """Nodes and weights for integrating y -> p_{t1}(x, y) p_{t2}(y, z) m(dy).

    Finite chains sum over all states with unit weights.  Diffusions use
    Gauss-Legendre on `box`, defaulting to BOX_SDS bridge standard deviations
    around the bridge mean; a box that misses more than 1e-10 of that
    Gaussian mass triggers a QuadratureWarning.
    """
    if kernel.space.is_finite:
        return np.arange(kernel.space.size), np.ones(kernel.space.size)
    if box is None:
        box = default_box(kernel, t1, t2, x, z)
    else:
        box = [(float(lo), float(hi)) for lo, hi in (box if np.ndim(box) == 2 else [box])]
        cover = box_coverage(kernel, t1, t2, x, z, box)
        if cover < BOX_MASS:
            warnings.warn(f"quadrature box {box} covers only {cover:.12f} of the mass", QuadratureWarning)
    return gauss_legendre_box(nodes, box)


def ck_residual(kernel: TransitionKernel, s, t, x, z, quad_nodes: int = 256, box=None) -> float:
    """|p_{t+s}(x,z) - int p_t(x,y) p_s(y,z) m(dy)|."""
    s = kernel.check_time(s)
    t = kernel.check_time(t)
    kernel.check_time(s + t)
    if kernel.space.is_finite:
        lhs = kernel.transition_matrix(s + t)[int(x), int(z)]
        rhs = kernel.transition_matrix(t)[int(x)] @ kernel.transition_matrix(s)[:, int(z)]
        return float(abs(lhs - rhs))
    x = kernel.space.as_state(x)
    z = kernel.space.as_state(z)
    ys, w = integration_rule(kernel, t, s, x, z, quad_nodes, box)
    rhs = np.sum(w * kernel.density(t, x, ys) * kernel.density(s, ys, z))
    lhs = kernel.density(s + t, x, z)
    return float(abs(lhs - rhs))
