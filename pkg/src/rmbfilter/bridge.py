"""Markov bridges with a fixed or a random terminal pin, and path samplers.

Two samplers are provided.  ``exact-bridge`` draws each grid value from the
bridge transition density given the previous value and the pin; it is exact
in distribution on the grid and serves as the reference.  ``euler-sde``
discretizes dZ = {b + sigma sigma^T grad log p_{T-t}(Z, X)} dt + sigma dW.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConstructionError, DomainError, NumericError, UnsupportedOperationError
from .kernels import GaussianKernel, TransitionKernel
from .parallel import DEFAULT_BLOCK, block_rng, map_blocks
from .statespace import Prior

EXACT = "exact-bridge"
EULER = "euler-sde"
SAMPLERS = (EXACT, EULER)

#: default distance from the horizon at which paths stop, relative to T
DEFAULT_EPSILON_FRACTION = 1e-4


@dataclass(frozen=True, eq=False)
class BridgeSpec:
    """Start y0 at time 0, horizon T, and either a fixed pin z or a prior for X."""

    kernel: TransitionKernel
    y0: object
    pin: Union[Prior, object]
    T: Optional[float] = None

    def __post_init__(self):
        T = self.kernel.horizon if self.T is None else float(self.T)
        if not T > 0:
            raise ConstructionError(f"horizon must be positive, got {T}")
        if abs(T - self.kernel.horizon) > 1e-12 * max(1.0, T):
            raise ConstructionError(f"bridge horizon {T} differs from kernel horizon {self.kernel.horizon}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "y0", self.kernel.space.as_state(self.y0))
        if not isinstance(self.pin, Prior):
            object.__setattr__(self, "pin", self.kernel.space.as_state(self.pin))

    @property
    def randomised(self) -> bool:
        return isinstance(self.pin, Prior)

    def fixed_pin(self):
        if self.randomised:
            raise DomainError("this operation needs a bridge with a fixed pin")
        return self.pin


def uniform_grid(T: float, steps: int, epsilon: Optional[float] = None) -> np.ndarray:
    """``steps + 1`` equally spaced times from 0 to T - epsilon."""
    if epsilon is None:
        epsilon = DEFAULT_EPSILON_FRACTION * T
    if not 0 < epsilon < T:
        raise DomainError(f"epsilon must lie in (0, T), got {epsilon}")
    if int(steps) != steps or steps < 1:
        raise DomainError(f"steps must be a positive integer, got {steps}")
    return np.linspace(0.0, T - epsilon, int(steps) + 1)


def check_grid(grid, T: float) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if len(grid) < 2 or grid[0] != 0.0:
        raise DomainError("grid must start at 0 and contain at least two times")
    if np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing")
    if not grid[-1] < T:
        raise DomainError(f"grid must stop strictly before the horizon {T}")
    return grid


@dataclass(frozen=True, eq=False)
class RmbPath:
    """A batch of sampled paths on a common grid.

    ``values`` has shape (paths, len(grid), n) for continuum kernels and
    (paths, len(grid)) for finite chains; ``hidden_pin`` has the matching
    per-path shape.  The pin is kept apart from the path: Z on [0, T) is the
    grid data, and Z_T = X is ``hidden_pin``.
    """

    grid: np.ndarray
    values: np.ndarray
    hidden_pin: np.ndarray
    sampler: str = EXACT
    seed: Optional[int] = None
    increments: Optional[np.ndarray] = None
    clamp_count: Optional[np.ndarray] = None
    drift_cap: Optional[float] = None

    def __post_init__(self):
        if self.values.shape[0] != self.hidden_pin.shape[0]:
            raise ConstructionError("values and hidden_pin disagree on the number of paths")
        if self.values.shape[1] != len(self.grid):
            raise ConstructionError("values and grid disagree on the number of times")

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def y0(self):
        return self.values[0, 0]

    def index_of(self, t: float) -> int:
        """Grid index of time t (nearest grid point, must match to 1e-9)."""
        i = int(np.argmin(np.abs(self.grid - t)))
        if abs(self.grid[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} is not on the path grid")
        return i

    def select(self, idx) -> "RmbPath":
        """Subset of paths."""
        inc = None if self.increments is None else self.increments[idx]
        cc = None if self.clamp_count is None else self.clamp_count[idx]
        return replace(self, values=self.values[idx], hidden_pin=self.hidden_pin[idx],
                       increments=inc, clamp_count=cc)

    def subsample(self, stride: int) -> "RmbPath":
        """Every `stride`-th grid point; increments are summed accordingly."""
        stride = int(stride)
        if (len(self.grid) - 1) % stride:
            raise DomainError(f"grid of {len(self.grid) - 1} steps is not divisible by {stride}")
        inc = None
        if self.increments is not None:
            sh = self.increments.shape
            inc = self.increments.reshape((sh[0], sh[1] // stride, stride) + sh[2:]).sum(axis=2)
        return replace(self, grid=self.grid[::stride], values=self.values[:, ::stride], increments=inc)

    def truncate(self, t: float) -> "RmbPath":
        """Paths restricted to grid times <= t."""
        i = self.index_of(t)
        inc = None if self.increments is None else self.increments[:, :i]
        return replace(self, grid=self.grid[: i + 1], values=self.values[:, : i + 1], increments=inc)

    @classmethod
    def concat(cls, parts: Sequence["RmbPath"]) -> "RmbPath":
        first = parts[0]

        def cat(name):
            arrs = [getattr(p, name) for p in parts]
            return None if arrs[0] is None else np.concatenate(arrs, axis=0)

        return replace(first, values=cat("values"), hidden_pin=cat("hidden_pin"),
                       increments=cat("increments"), clamp_count=cat("clamp_count"))


def likelihood_ratio(spec: BridgeSpec, t: float, y_t) -> np.ndarray:
    """p_{T-t}(y_t, z) / p_T(y0, z), computed in log space."""
    z = spec.fixed_pin()
    return np.exp(log_likelihood_ratio(spec.kernel, spec.T, spec.y0, t, y_t, z))


def log_likelihood_ratio(kernel: TransitionKernel, T, y0, t, y_t, z):
    if not 0 <= t < T:
        raise DomainError(f"likelihood ratio needs t in [0, {T}), got {t}")
    return kernel.log_density(T - t, y_t, z) - kernel.log_density(T, y0, z)


def bridge_transition_density(spec: BridgeSpec, s: float, y, t: float, y_next):
    """p^{(z,T)}(s, y; t, y') = p_{t-s}(y, y') p_{T-t}(y', z) / p_{T-s}(y, z)."""
    z = spec.fixed_pin()
    return np.exp(log_bridge_density(spec.kernel, spec.T, s, y, t, y_next, z))


def log_bridge_density(kernel: TransitionKernel, T, s, y, t, y_next, z):
    if not 0 <= s < t < T:
        raise DomainError(f"bridge density needs 0 <= s < t < T, got s={s}, t={t}, T={T}")
    return (kernel.log_density(t - s, y, y_next) + kernel.log_density(T - t, y_next, z)
            - kernel.log_density(T - s, y, z))


def _pin_batch(kernel, pin, n_paths):
    if kernel.space.is_finite:
        return np.full(n_paths, int(pin))
    return np.broadcast_to(pin, (n_paths, kernel.dimension)).copy()


def sample_prior(prior: Prior, uniforms) -> np.ndarray:
    """Inverse-CDF draws of atoms of `prior` from uniforms on [0, 1)."""
    cdf = np.cumsum(prior.weights)
    idx = np.searchsorted(cdf, np.asarray(uniforms) * cdf[-1], side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    return prior.support[idx]


def _exact_values(kernel: TransitionKernel, T, grid, y0, pins, rng) -> np.ndarray:
    n_paths = len(pins)
    N = len(grid) - 1
    if kernel.space.is_finite:
        u = rng.random((n_paths, N))
        vals = np.empty((n_paths, N + 1), dtype=int)
        vals[:, 0] = int(y0)
        for i in range(N):
            P_step = kernel.transition_matrix(grid[i + 1] - grid[i])
            P_rem = kernel.transition_matrix(T - grid[i + 1])
            probs = P_step[vals[:, i]] * P_rem[:, pins].T
            if np.any(probs.sum(axis=1) < 1e-300):
                raise NumericError(f"bridge step {i} has total mass below 1e-300")
            vals[:, i + 1] = kernel.sample_categorical(probs, u[:, i])
        return vals
    normals = rng.standard_normal((n_paths, N, kernel.dimension))
    vals = np.empty((n_paths, N + 1, kernel.dimension))
    vals[:, 0] = y0
    for i in range(N):
        mean, cov = kernel.bridge_moments(grid[i + 1] - grid[i], T - grid[i + 1], vals[:, i], pins)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"bridge covariance is singular at step {i}") from exc
        vals[:, i + 1] = mean + normals[:, i] @ L.T
    return vals


def sample_bridge_path(spec: BridgeSpec, grid, rng: np.random.Generator, n_paths: int = 1,
                       seed: Optional[int] = None) -> RmbPath:
    """Exact sequential sampling of the (y0, T, z)-bridge on `grid`."""
    z = spec.fixed_pin()
    grid = check_grid(grid, spec.T)
    pins = _pin_batch(spec.kernel, z, n_paths)
    vals = _exact_values(spec.kernel, spec.T, grid, spec.y0, pins, rng)
    return RmbPath(grid, vals, pins, EXACT, seed)


def drift_cap_constant(kernel: GaussianKernel, prior: Prior, y0, T: float) -> float:
    """c in the cap c / sqrt(T - t) on the score drift."""
    sig = float(np.linalg.norm(kernel.sigma(np.asarray(y0, dtype=float)), 2))
    pts = np.vstack([prior.support, np.asarray(y0, dtype=float).reshape(1, -1)])
    diam = float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))
    return 10.0 * sig * max(diam, sig * np.sqrt(T))


def _euler_step(kernel: GaussianKernel, T, t, z, x, dt, dW, cap=None):
    """Vectorized Euler step; returns (new state, mask of capped paths)."""
    sc = kernel.score(T - t, z, x)
    if not np.all(np.isfinite(sc)):
        raise NumericError(f"score is not finite at t={t}; stop paths further from T (larger epsilon)")
    a = kernel.diffusion_matrix(z)
    push = np.einsum("...ij,...j->...i", a, sc)
    capped = np.zeros(push.shape[:-1], dtype=bool)
    if cap is not None:
        limit = cap / np.sqrt(T - t)
        mag = np.linalg.norm(push, axis=-1)
        capped = mag > limit
        if np.any(capped):
            push = np.where(capped[..., None], push * (limit / np.where(capped, mag, 1.0))[..., None], push)
    new = z + (kernel.drift(z) + push) * dt + np.einsum("...ij,...j->...i", kernel.sigma(z), dW)
    return new, capped


def euler_rmb_step(kernel: TransitionKernel, t: float, z, x, dt: float, gaussian_increment,
                   T: Optional[float] = None, epsilon: float = 0.0):
    """One Euler step z + {b(z) + (sigma sigma^T)(z) grad log p_{T-t}(z, x)} dt + sigma(z) dW."""
    if not kernel.is_diffusion:
        raise UnsupportedOperationError("Euler steps need a diffusion kernel")
    T = kernel.horizon if T is None else T
    if t + dt > T - epsilon + 1e-15:
        raise DomainError(f"step to {t + dt} passes T - epsilon = {T - epsilon}")
    z = np.asarray(z, dtype=float)
    new, _ = _euler_step(kernel, T, t, z, np.asarray(x, dtype=float), dt,
                         np.asarray(gaussian_increment, dtype=float))
    return new


def _euler_values(kernel, T, grid, y0, pins, rng, cap):
    n_paths = len(pins)
    N = len(grid) - 1
    dts = np.diff(grid)
    dW = rng.standard_normal((n_paths, N, kernel.dimension)) * np.sqrt(dts)[None, :, None]
    vals = np.empty((n_paths, N + 1, kernel.dimension))
    vals[:, 0] = y0
    clamps = np.zeros(n_paths, dtype=int)
    for i in range(N):
        vals[:, i + 1], capped = _euler_step(kernel, T, grid[i], vals[:, i], pins, dts[i], dW[:, i], cap)
        clamps += capped
    return vals, dW, clamps


def sample_rmb_path(spec: BridgeSpec, grid, rng: np.random.Generator, mode: str = EXACT,
                    n_paths: int = 1, seed: Optional[int] = None) -> RmbPath:
    """Draw X ~ prior per path, then a (y0, T, X)-bridge with the chosen sampler."""
    if mode not in SAMPLERS:
        raise DomainError(f"unknown sampler {mode!r}; expected one of {SAMPLERS}")
    kernel = spec.kernel
    if mode == EULER and not kernel.is_diffusion:
        raise UnsupportedOperationError("euler-sde sampling needs a diffusion kernel")
    grid = check_grid(grid, spec.T)
    if spec.randomised:
        pins = sample_prior(spec.pin, rng.random(n_paths))
    else:
        pins = _pin_batch(kernel, spec.pin, n_paths)
    if mode == EXACT:
        vals = _exact_values(kernel, spec.T, grid, spec.y0, pins, rng)
        return RmbPath(grid, vals, pins, EXACT, seed)
    prior = spec.pin if spec.randomised else Prior(spec.pin.reshape(1, -1), [1.0], kernel.space)
    cap = drift_cap_constant(kernel, prior, spec.y0, spec.T)
    vals, dW, clamps = _euler_values(kernel, spec.T, grid, spec.y0, pins, rng, cap)
    return RmbPath(grid, vals, pins, EULER, seed, increments=dW, clamp_count=clamps, drift_cap=cap)


def simulate(spec: BridgeSpec, grid, n_paths: int, seed: int, mode: str = EXACT,
             workers: int = 1, block_size: int = DEFAULT_BLOCK) -> RmbPath:
    """Sample `n_paths` paths in seeded blocks; the result does not depend on `workers`."""

    def run(block, size):
        return sample_rmb_path(spec, grid, block_rng(seed, block), mode, size, seed)

    return RmbPath.concat(map_blocks(run, n_paths, block_size, workers))
