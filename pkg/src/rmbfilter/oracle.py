"""Independent verifiers for the closed-form filter.

``telescoping_posterior`` runs full-history Bayes over an observation
skeleton, multiplying every fixed-pin bridge transition density without
cancelling terms.  ``abc_posterior`` estimates the posterior by rejection:
simulate (X, Z_t) pairs from the model and keep the pins of paths whose Z_t
lands near the observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .bridge import _exact_values, log_bridge_density
from .errors import DomainError, NumericError
from .filter import normalize_log_weights
from .kernels import TransitionKernel
from .parallel import block_rng, map_blocks
from .statespace import Posterior, Prior, total_variation

MIN_ACCEPTED = 100


def telescoping_posterior(kernel: TransitionKernel, prior: Prior, observations: Sequence[Tuple[float, object]],
                          T: Optional[float] = None) -> Posterior:
    """P(X = x | Z_{t_0}, ..., Z_{t_n}) from the product of bridge transition densities."""
    T = kernel.horizon if T is None else T
    if len(observations) < 2:
        raise DomainError("need the initial observation and at least one more")
    times = np.array([float(t) for t, _ in observations])
    if times[0] != 0.0:
        raise DomainError("the first observation must be at time 0")
    if np.any(np.diff(times) <= 0) or not times[-1] < T:
        raise DomainError("observation times must increase strictly and stay below T")
    states = [kernel.space.as_state(z) for _, z in observations]
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    for i, x in enumerate(prior.support):
        if prior.weights[i] == 0:
            continue
        for k in range(1, len(states)):
            term = log_bridge_density(kernel, T, times[k - 1], states[k - 1], times[k], states[k], x)
            if not np.isfinite(term):
                raise NumericError(f"bridge density underflowed at observation {k} for atom {i}")
            logw[i] += term
    return Posterior(prior.support, normalize_log_weights(logw), prior.space)


@dataclass(frozen=True)
class AbcPosterior:
    posterior: Posterior
    accepted: int
    n_paths: int
    window: float


def abc_posterior(kernel: TransitionKernel, prior: Prior, z0, T: Optional[float], t: float, zt,
                  window: float, n_paths: int, seed: int = 0, workers: int = 1,
                  block_size: int = 100_000) -> AbcPosterior:
    """Rejection estimate of pi_t given Z_t within `window` of zt (hard cutoff)."""
    T = kernel.horizon if T is None else T
    if not window > 0:
        raise DomainError(f"window must be positive, got {window}")
    if not 0 < t < T:
        raise DomainError(f"need 0 < t < T, got {t}")
    z0 = kernel.space.as_state(z0)
    zt = kernel.space.as_state(zt)
    grid = np.array([0.0, t])
    cdf = np.cumsum(prior.weights)

    def run(block, size):
        rng = block_rng(seed, block)
        idx = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), len(cdf) - 1)
        vals = _exact_values(kernel, T, grid, z0, prior.support[idx], rng)[:, -1]
        if kernel.space.is_finite:
            dist = np.abs(vals - zt).astype(float)
        else:
            dist = np.max(np.abs(vals - zt), axis=-1)
        return np.bincount(idx[dist <= window], minlength=len(prior))

    counts = np.sum(map_blocks(run, n_paths, block_size, workers), axis=0)
    accepted = int(counts.sum())
    if accepted < MIN_ACCEPTED:
        raise NumericError(f"only {accepted} paths accepted; use a larger window or more paths")
    post = Posterior(prior.support, counts / accepted, prior.space)
    return AbcPosterior(post, accepted, int(n_paths), float(window))


def compare(a: Posterior, b: Posterior) -> float:
    """Total variation distance between posteriors on matched supports."""
    return total_variation(a, b)
