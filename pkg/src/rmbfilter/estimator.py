"""scikit-learn compatible front end for the closed-form filter.

Each input row is one observation ``[t, z0_1..z0_n, zt_1..zt_n]``; the
output of ``predict_proba`` / ``transform`` is the posterior over the prior
atoms (``atoms_``), and ``predict`` returns the posterior mean.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConstructionError, DomainError
from .filter import normalize_log_weights
from .kernels import TransitionKernel
from .statespace import Prior, make_atomic_prior


class RMBFilter(TransformerMixin, BaseEstimator):
    """Posterior of the hidden pin X given (t, Z_0, Z_t).

    Parameters
    ----------
    kernel : TransitionKernel
        Transition density of the unconditioned process.
    prior : Prior, optional
        Law of X.  When omitted, ``fit`` builds the empirical law of the
        revealed terminal values passed as ``y``.
    horizon : float, optional
        Terminal time T; defaults to the kernel's horizon.
    """

    def __init__(self, kernel: TransitionKernel = None, prior: Prior = None, horizon: float = None):
        self.kernel = kernel
        self.prior = prior
        self.horizon = horizon

    def fit(self, X=None, y=None):
        if not isinstance(self.kernel, TransitionKernel):
            raise ConstructionError("RMBFilter needs a TransitionKernel")
        space = self.kernel.space
        if self.prior is not None:
            prior = self.prior
        elif y is not None:
            pins = np.asarray(y)
            if not space.is_finite:
                pins = check_array(pins.reshape(len(pins), -1), ensure_2d=True)
            atoms, counts = np.unique(pins, axis=0, return_counts=True)
            prior = make_atomic_prior(atoms, counts, space)
        else:
            raise ConstructionError("fit needs a prior or revealed terminal values y")
        self.prior_ = prior
        self.horizon_ = float(self.kernel.horizon if self.horizon is None else self.horizon)
        self.atoms_ = prior.support
        self.n_features_in_ = 1 + 2 * space.dimension
        if X is not None:
            self._split(X)
        return self

    def _split(self, X):
        X = check_array(X, dtype=float)
        n = self.kernel.space.dimension
        if X.shape[1] != 1 + 2 * n:
            raise DomainError(f"expected {1 + 2 * n} columns [t, z0, zt], got {X.shape[1]}")
        t = X[:, 0]
        if np.any(t < 0) or np.any(t >= self.horizon_):
            raise DomainError(f"observation times must lie in [0, {self.horizon_})")
        z0, zt = X[:, 1:1 + n], X[:, 1 + n:]
        if self.kernel.space.is_finite:
            z0, zt = self.kernel.space.as_states(z0), self.kernel.space.as_states(zt)
        return t, z0, zt

    def predict_log_weights(self, X):
        """Unnormalized log posterior weights, shape (n_samples, n_atoms)."""
        check_is_fitted(self, "prior_")
        t, z0, zt = self._split(X)
        kernel, prior, T = self.kernel, self.prior_, self.horizon_
        with np.errstate(divide="ignore"):
            logp = np.log(prior.weights)
        out = np.tile(logp, (len(t), 1))
        finite = kernel.space.is_finite
        for tv in np.unique(t):
            if tv == 0:
                continue
            rows = t == tv
            a = zt[rows][:, None] if finite else zt[rows][:, None, :]
            b = z0[rows][:, None] if finite else z0[rows][:, None, :]
            out[rows] += (kernel.log_density(T - tv, a, prior.support)
                          - kernel.log_density(T, b, prior.support))
        return out

    def predict_proba(self, X):
        logw = self.predict_log_weights(X)
        out = normalize_log_weights(logw)
        out[np.asarray(X)[:, 0] == 0] = self.prior_.weights
        return out

    def transform(self, X):
        return self.predict_proba(X)

    def predict(self, X):
        """Posterior mean of X (of its labels for finite chains)."""
        proba = self.predict_proba(X)
        space = self.kernel.space
        if space.is_finite:
            labels = np.array([float(space.points[i]) for i in self.atoms_])
            return proba @ labels
        mean = proba @ self.atoms_
        return mean[:, 0] if space.dimension == 1 else mean
