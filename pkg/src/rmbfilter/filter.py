"""Closed-form filter for the hidden pin X of a randomised Markov bridge.

The posterior of X given the observations up to time t depends on the path
only through (Z_0, Z_t)::

    pi_t(dz)  proportional to  p_{T-t}(Z_t, z) / p_T(Z_0, z) nu(dz)

All weight arithmetic is done on log-weights with a max shift before
exponentiating, because p_{T-t}(Z_t, z) spans hundreds of orders of
magnitude across atoms as t approaches T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .bridge import log_bridge_density
from .errors import DomainError, NumericError
from .kernels import TransitionKernel, integration_rule
from .statespace import (
    Posterior,
    Prior,
    WeightedMeasure,
    expectation,
    gauss_legendre_box,
    total_variation,
)


@dataclass(frozen=True, eq=False)
class FilterInput:
    """Everything the filter consumes: kernel, prior, horizon and (t, Z_t, Z_0)."""

    kernel: TransitionKernel
    prior: Prior
    z0: object
    t: float
    zt: object
    T: Optional[float] = None

    def __post_init__(self):
        T = self.kernel.horizon if self.T is None else float(self.T)
        object.__setattr__(self, "T", T)
        if not 0 <= self.t < T:
            raise DomainError(f"filter time must lie in [0, {T}), got {self.t}")
        space = self.kernel.space
        object.__setattr__(self, "z0", space.as_state(self.z0))
        object.__setattr__(self, "zt", space.as_state(self.zt))


def _log_prior(prior: Prior) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(prior.weights)


def _batch_shape(kernel, zt) -> tuple:
    shape = np.shape(zt)
    return shape if kernel.space.is_finite else shape[:-1]


def _pair(kernel, a, support):
    """Broadcast observation batch `a` against the support: (..., m) pairs."""
    if kernel.space.is_finite:
        return np.asarray(a)[..., None], support
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    return a[..., None, :], support


def log_unnormalized_weights(kernel: TransitionKernel, prior: Prior, T: float, z0, t: float, zt):
    """log rho_t({z_i}) for every atom; `zt` may carry a leading batch axis.

    At t = 0 the ratio is identically one and the prior log-weights are
    returned without evaluating a density.
    """
    logp = _log_prior(prior)
    if t == 0:
        return np.broadcast_to(logp, _batch_shape(kernel, zt) + logp.shape).copy()
    if not 0 < t < T:
        raise DomainError(f"filter time must lie in [0, {T}), got {t}")
    a, b = _pair(kernel, zt, prior.support)
    num = kernel.log_density(T - t, a, b)
    den = kernel.log_density(T, kernel.space.as_state(z0), prior.support)
    return num - den + logp


def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with a max shift."""
    top = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericError("all posterior weights underflow; the observation is incompatible "
                           "with the (truncated) prior support")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def posterior_weights(kernel: TransitionKernel, prior: Prior, T: float, z0, t: float, zt) -> np.ndarray:
    """Posterior probabilities of the atoms; batched over `zt`."""
    if t == 0:
        return np.broadcast_to(prior.weights, _batch_shape(kernel, zt) + prior.weights.shape).copy()
    return normalize_log_weights(log_unnormalized_weights(kernel, prior, T, z0, t, zt))


def unnormalized_posterior(inp: FilterInput) -> WeightedMeasure:
    """rho_t(dz) = p_{T-t}(Z_t, z) / p_T(Z_0, z) nu(dz) as a weighted measure."""
    if inp.t == 0:
        if not np.array_equal(inp.zt, inp.z0):
            raise DomainError("at t = 0 the observation must equal Z_0")
        return WeightedMeasure(inp.prior.support, inp.prior.weights, inp.prior.space)
    logw = log_unnormalized_weights(inp.kernel, inp.prior, inp.T, inp.z0, inp.t, inp.zt)
    w = np.exp(logw)
    if not np.any(w > 0):
        raise NumericError("all unnormalized weights underflow")
    if not np.all(np.isfinite(w)):
        raise NumericError("unnormalized weights overflow")
    return WeightedMeasure(inp.prior.support, w, inp.prior.space)


def posterior(inp: FilterInput) -> Posterior:
    """pi_t = rho_t / rho_t(1); pi_0 is the prior itself."""
    if inp.t == 0:
        return Posterior(inp.prior.support, inp.prior.weights, inp.prior.space)
    w = posterior_weights(inp.kernel, inp.prior, inp.T, inp.z0, inp.t, inp.zt)
    return Posterior(inp.prior.support, w, inp.prior.space)


def price(inp: FilterInput, payoff: Callable, rate: float = 0.0) -> float:
    """Discounted conditional expectation exp(-r (T - t)) pi_t(f)."""
    if rate < 0:
        raise DomainError(f"rate must be nonnegative, got {rate}")
    return float(np.exp(-rate * (inp.T - inp.t)) * expectation(posterior(inp), payoff))


def log_h(kernel: TransitionKernel, prior: Prior, T: float, z0, t: float, y):
    """log int p_{T-t}(y, z) / p_T(z0, z) nu(dz), batched over y."""
    a, b = _pair(kernel, y, prior.support)
    terms = (kernel.log_density(T - t, a, b)
             - kernel.log_density(T, kernel.space.as_state(z0), prior.support)
             + _log_prior(prior))
    return logsumexp(terms, axis=-1)


def log_rmb_transition_density(kernel, prior, z0, T, s, x, t, y):
    if not 0 <= s < t < T:
        raise DomainError(f"need 0 <= s < t < T, got s={s}, t={t}, T={T}")
    out = kernel.log_density(t - s, x, y) + log_h(kernel, prior, T, z0, t, y) - log_h(kernel, prior, T, z0, s, x)
    if not np.all(np.isfinite(out)):
        raise NumericError("RMB transition density underflowed")
    return out


def rmb_transition_density(kernel: TransitionKernel, prior: Prior, z0, T: Optional[float],
                           s: float, x, t: float, y):
    """q(s, x; t, y | z0): transition density of Z given Z_0 = z0."""
    T = kernel.horizon if T is None else T
    return np.exp(log_rmb_transition_density(kernel, prior, z0, T, s, x, t, y))


def mixture_transition_density(kernel, prior, z0, T, s, x, t, y):
    """q written as the pi_s-mixture of fixed-pin bridge densities (independent route)."""
    T = kernel.horizon if T is None else T
    x = kernel.space.as_state(x)
    logw = (kernel.log_density(T - s, x, prior.support)
            - kernel.log_density(T, kernel.space.as_state(z0), prior.support) + _log_prior(prior))
    pis = normalize_log_weights(logw)
    total = 0.0
    for z, p in zip(prior.support, pis):
        if p > 0:
            total = total + p * np.exp(log_bridge_density(kernel, T, s, x, t, y, z))
    return total


def rmb_ck_residual(kernel: TransitionKernel, prior: Prior, z0, s, t, u, x, z,
                    quad_nodes: int = 256, box=None, T: Optional[float] = None) -> float:
    """|q(s,x;u,z) - int q(s,x;t,y) q(t,y;u,z) m(dy)| for fixed z0."""
    T = kernel.horizon if T is None else T
    if not 0 < s < t < u < T:
        raise DomainError(f"need 0 < s < t < u < T, got {(s, t, u)}")
    x = kernel.space.as_state(x)
    z = kernel.space.as_state(z)
    ys, w = integration_rule(kernel, t - s, u - t, x, z, quad_nodes, box)
    left = rmb_transition_density(kernel, prior, z0, T, s, x, t, ys)
    right = rmb_transition_density(kernel, prior, z0, T, t, ys, u, z)
    lhs = rmb_transition_density(kernel, prior, z0, T, s, x, u, z)
    return float(abs(lhs - np.sum(w * left * right)))


def terminal_limit_gap(kernel: TransitionKernel, prior: Prior, z0, s: float, zs, t: float,
                       window_constant: float = 0.1, nodes: int = 64, T: Optional[float] = None) -> float:
    """TV distance between P_{s,t}(zs, . | z0) collapsed onto the atoms and pi_s.

    For continuum kernels each atom receives the q-mass of the box of
    half-width window_constant * sqrt(T - t) around it; finite chains use
    the atom itself.  The collapsed masses are renormalized before comparing.
    """
    T = kernel.horizon if T is None else T
    if prior.representation != "atomic":
        raise DomainError("terminal_limit_gap needs an atomic prior")
    if not 0 <= s < t < T:
        raise DomainError(f"need 0 <= s < t < T, got s={s}, t={t}")
    zs = kernel.space.as_state(zs)
    if kernel.space.is_finite:
        masses = rmb_transition_density(kernel, prior, z0, T, s, zs, t, prior.support)
    else:
        w = window_constant * np.sqrt(T - t)
        pts = prior.support
        if len(pts) > 1:
            gaps = np.max(np.abs(pts[:, None, :] - pts[None, :, :]), axis=-1)
            np.fill_diagonal(gaps, np.inf)
            if gaps.min() < 2 * w:
                raise DomainError(f"windows of half-width {w} overlap; use a smaller window constant")
        masses = np.empty(len(pts))
        for i, atom in enumerate(pts):
            ys, qw = gauss_legendre_box(nodes, [(a - w, a + w) for a in atom])
            masses[i] = np.sum(qw * rmb_transition_density(kernel, prior, z0, T, s, zs, t, ys))
    total = masses.sum()
    if not total > 0:
        raise NumericError("no q-mass near any atom")
    collapsed = Posterior(prior.support, masses / total, prior.space)
    pi_s = posterior(FilterInput(kernel, prior, z0, s, zs, T))
    return total_variation(collapsed, pi_s)
