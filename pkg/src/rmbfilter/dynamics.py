"""Pathwise checks of the filter's stochastic dynamics on a time grid.

Both sides of each identity are evaluated on the same sampled path: the
closed-form filter gives rho_t(f) and pi_t(f) directly, and the stochastic
integrals are left-point (Ito) sums over the grid.  The residuals therefore
vanish at the strong rate 1/2 of the left-point sums as the grid is refined.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .bridge import EXACT, BridgeSpec, RmbPath, check_grid, simulate
from .errors import DomainError, NumericError, UnsupportedOperationError
from .filter import log_unnormalized_weights, normalize_log_weights
from .kernels import TransitionKernel
from .parallel import DEFAULT_BLOCK
from .statespace import Prior, _function_values

MIN_MARTINGALE_PATHS = 1000


def _require_diffusion(kernel):
    if not kernel.is_diffusion:
        raise UnsupportedOperationError(f"{type(kernel).__name__} is not a diffusion kernel")


def ell_score(kernel: TransitionKernel, T: float, s: float, zs, z):
    """Gradient of l_s(z) = log p_{T-s}(Z_s, z) with respect to Z_s."""
    if not s < T:
        raise DomainError(f"need s < T, got s={s}, T={T}")
    return kernel.score(T - s, zs, z)


@dataclass
class FilterTrajectory:
    """Per-path filter quantities along the grid.

    Shapes: ``rho_f``, ``rho_1``, ``pi_f`` are (paths, times); the integrand
    arrays are (paths, steps, n) with the value at the left end of each step.
    """

    grid: np.ndarray
    rho_f: np.ndarray
    rho_1: np.ndarray
    pi_f: np.ndarray
    pi_score: np.ndarray
    zakai_integrand: np.ndarray
    ks_integrand: np.ndarray
    zakai_increment: np.ndarray
    ks_increment: np.ndarray

    def zakai_residual(self, index: int = -1) -> np.ndarray:
        k = index % len(self.grid)
        return self.rho_f[:, k] - self.rho_f[:, 0] - self.zakai_increment[:, :k].sum(axis=1)

    def ks_residual(self, index: int = -1) -> np.ndarray:
        k = index % len(self.grid)
        return self.pi_f[:, k] - self.pi_f[:, 0] - self.ks_increment[:, :k].sum(axis=1)


def filter_trajectory(path: RmbPath, kernel: TransitionKernel, prior: Prior, f: Callable,
                      z0=None, T: Optional[float] = None) -> FilterTrajectory:
    """Evaluate rho_t(f), pi_t(f) and the Zakai / Kushner-Stratonovich integrands."""
    _require_diffusion(kernel)
    T = kernel.horizon if T is None else T
    z0 = path.y0 if z0 is None else kernel.space.as_state(z0)
    fv = _function_values(prior, f)
    if fv.ndim != 1:
        raise DomainError("filter dynamics need a scalar payoff f")
    Z = path.values
    P, n_times, n = Z.shape
    steps = n_times - 1
    dts = np.diff(path.grid)
    rho_f = np.empty((P, n_times))
    rho_1 = np.empty((P, n_times))
    pi_f = np.empty((P, n_times))
    pi_score = np.empty((P, steps, n))
    zak_int = np.empty((P, steps, n))
    ks_int = np.empty((P, steps, n))
    zak_inc = np.empty((P, steps))
    ks_inc = np.empty((P, steps))
    for i, t in enumerate(path.grid):
        logw = log_unnormalized_weights(kernel, prior, T, z0, t, Z[:, i])
        rho = np.exp(logw)
        pi = normalize_log_weights(logw)
        rho_f[:, i] = rho @ fv
        rho_1[:, i] = rho.sum(axis=1)
        pi_f[:, i] = pi @ fv
        if i == steps:
            break
        grad = kernel.score(T - t, Z[:, i, None, :], prior.support[None, :, :])
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"score is not finite at step {i} (t={t})")
        zak_int[:, i] = np.einsum("pm,m,pmk->pk", rho, fv, grad)
        pis = np.einsum("pm,pmk->pk", pi, grad)
        pifs = np.einsum("pm,m,pmk->pk", pi, fv, grad)
        pi_score[:, i] = pis
        ks_int[:, i] = pifs - pi_f[:, i, None] * pis
        b = kernel.drift(Z[:, i])
        a = kernel.diffusion_matrix(Z[:, i])
        dZ = Z[:, i + 1] - Z[:, i]
        zak_inc[:, i] = np.einsum("pk,pk->p", zak_int[:, i], dZ - b * dts[i])
        innov = dZ - (b + np.einsum("pij,pj->pi", a, pis)) * dts[i]
        ks_inc[:, i] = np.einsum("pk,pk->p", ks_int[:, i], innov)
    return FilterTrajectory(path.grid, rho_f, rho_1, pi_f, pi_score, zak_int, ks_int, zak_inc, ks_inc)


def _index(path: RmbPath, t: Optional[float]) -> int:
    return len(path.grid) - 1 if t is None else path.index_of(t)


def zakai_residual(path: RmbPath, kernel: TransitionKernel, prior: Prior, f: Callable,
                   z0=None, t: Optional[float] = None, T: Optional[float] = None) -> np.ndarray:
    """rho_t(f) - rho_0(f) - sum rho_s(f grad l_s) . (dZ_s - b(Z_s) ds), one value per path."""
    k = _index(path, t)
    traj = filter_trajectory(path.truncate(path.grid[k]), kernel, prior, f, z0, T)
    return traj.zakai_residual()


def ks_residual(path: RmbPath, kernel: TransitionKernel, prior: Prior, f: Callable,
                z0=None, t: Optional[float] = None, T: Optional[float] = None) -> np.ndarray:
    """Kushner-Stratonovich residual, one value per path."""
    k = _index(path, t)
    traj = filter_trajectory(path.truncate(path.grid[k]), kernel, prior, f, z0, T)
    return traj.ks_residual()


@dataclass
class ResidualReport:
    """RMS and max residuals per step size with the fitted log-log slope."""

    equation: str
    step_sizes: List[float]
    rms: List[float]
    max_abs: List[float]
    order: float
    paths: int
    seed: Optional[int]
    t: float

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.step_sizes, self.step_sizes[1:])):
            raise DomainError("step sizes must be strictly decreasing")

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.rms, self.rms[1:]))

    def passes(self, order_band=(0.35, 0.75)) -> bool:
        return self.monotone and order_band[0] <= self.order <= order_band[1]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["monotone"] = self.monotone
        return out


def convergence_order(step_sizes: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(step size)."""
    slope, _ = np.polyfit(np.log(step_sizes), np.log(errors), 1)
    return float(slope)


def residual_convergence(spec: BridgeSpec, f: Callable, step_sizes: Sequence[float], t: float,
                         n_paths: int, seed: int, equation: str = "zakai", mode: str = EXACT,
                         workers: int = 1, block_size: int = DEFAULT_BLOCK) -> ResidualReport:
    """Residual RMS at time t for each step size, on nested grids of one path ensemble.

    Paths are sampled once on the finest grid; coarser grids are subsamples,
    so every step size sees the same realized paths.
    """
    if equation not in ("zakai", "ks"):
        raise DomainError(f"unknown equation {equation!r}")
    step_sizes = sorted((float(h) for h in step_sizes), reverse=True)
    finest = step_sizes[-1]
    n_fine = int(round(t / finest))
    if abs(n_fine * finest - t) > 1e-9 * t:
        raise DomainError(f"t={t} is not a multiple of the finest step {finest}")
    strides = []
    for h in step_sizes:
        stride = int(round(h / finest))
        if abs(stride * finest - h) > 1e-9 * h or n_fine % stride:
            raise DomainError(f"step {h} is not a multiple of the finest step {finest}")
        strides.append(stride)
    grid = np.linspace(0.0, t, n_fine + 1)
    paths = simulate(spec, grid, n_paths, seed, mode, workers, block_size)
    rms, mx = [], []
    for stride in strides:
        coarse = paths.subsample(stride)
        traj = filter_trajectory(coarse, spec.kernel, spec.pin, f, spec.y0, spec.T)
        r = traj.zakai_residual() if equation == "zakai" else traj.ks_residual()
        rms.append(float(np.sqrt(np.mean(r**2))))
        mx.append(float(np.max(np.abs(r))))
    return ResidualReport(equation, step_sizes, rms, mx, convergence_order(step_sizes, rms),
                          n_paths, seed, t)


@dataclass
class IntegrabilityEstimate:
    """Monte Carlo estimate of the integrability quantity behind the filter SDEs."""

    value: float
    batch_sizes: List[int]
    batch_means: List[float]
    divergent: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _integrability_terms(path: RmbPath, kernel, prior, T, z0, fv):
    """Per-path value of sum_z |f(z)| / p_T(z0,z) [int |sigma^T p grad l|^2 ds]^(1/2) nu(z)."""
    Z = path.values
    P = Z.shape[0]
    acc = np.zeros((P, len(prior)))
    dts = np.diff(path.grid)
    for i, s in enumerate(path.grid[:-1]):
        a = Z[:, i, None, :]
        grad = kernel.score(T - s, a, prior.support[None])
        dens = kernel.density(T - s, a, prior.support[None])
        sig = kernel.sigma(Z[:, i])
        v = np.einsum("pji,pmj->pmi", sig, grad) * dens[..., None]
        acc += np.sum(v**2, axis=-1) * dts[i]
    scale = np.abs(fv) * prior.weights / kernel.density(T, z0, prior.support)
    return np.sqrt(acc) @ scale


def integrability_estimate(kernel: TransitionKernel, prior: Prior, z0, t: float, f: Callable,
                           paths: int, seed: int = 0, steps: int = 1000,
                           workers: int = 1) -> IntegrabilityEstimate:
    """Estimate the integrability condition over `paths` sampled RMB paths.

    The per-path quantity is averaged over cumulative prefixes of 1/8, 1/4,
    1/2 and all of the paths; the estimate is flagged divergent when the mean
    grows by more than 10% at each of those three doublings.
    """
    _require_diffusion(kernel)
    T = kernel.horizon
    if not 0 < t < T:
        raise DomainError(f"need 0 < t < T, got {t}")
    fv = _function_values(prior, f)
    if np.all(fv == 0):
        return IntegrabilityEstimate(0.0, [int(paths)], [0.0], False)
    z0 = kernel.space.as_state(z0)
    spec = BridgeSpec(kernel, z0, prior)
    grid = check_grid(np.linspace(0.0, t, int(steps) + 1), T)
    sample = simulate(spec, grid, paths, seed, EXACT, workers)
    per_path = _integrability_terms(sample, kernel, prior, T, z0, fv)
    sizes = sorted({max(1, paths // 8), max(1, paths // 4), max(1, paths // 2), paths})
    means = [float(per_path[:k].mean()) for k in sizes]
    growth = [b > 1.1 * a for a, b in zip(means, means[1:])]
    divergent = len(growth) >= 3 and all(growth[-3:])
    if not np.isfinite(means[-1]):
        divergent = True
    return IntegrabilityEstimate(means[-1], sizes, means, divergent)


#: name used by the command-line interface
condition_2_5_estimate = integrability_estimate


@dataclass
class InnovationRecord:
    """Innovation process M and its normalized version B along each path.

    M_t = Z_t - Z_0 - int_0^t {b(Z_s) + a(Z_s) pi_s(grad l_s)} ds is stored
    relative to Z_0 so that M_0 = 0; B_t = int_0^t a(Z_s)^(-1/2) dM_s.
    """

    grid: np.ndarray
    M: np.ndarray
    B: np.ndarray
    pi_score: np.ndarray


def _inverse_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    if np.any(vals <= 0):
        raise NumericError("sigma sigma^T is singular; the innovation Brownian motion is undefined")
    return np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / np.sqrt(vals), vecs)


def innovation_path(path: RmbPath, kernel: TransitionKernel, prior: Prior, z0=None,
                    T: Optional[float] = None) -> InnovationRecord:
    _require_diffusion(kernel)
    T = kernel.horizon if T is None else T
    z0 = path.y0 if z0 is None else kernel.space.as_state(z0)
    Z = path.values
    P, n_times, n = Z.shape
    dts = np.diff(path.grid)
    M = np.zeros((P, n_times, n))
    B = np.zeros((P, n_times, n))
    pi_score = np.empty((P, n_times - 1, n))
    for i, t in enumerate(path.grid[:-1]):
        pi = normalize_log_weights(log_unnormalized_weights(kernel, prior, T, z0, t, Z[:, i]))
        grad = kernel.score(T - t, Z[:, i, None, :], prior.support[None])
        pis = np.einsum("pm,pmk->pk", pi, grad)
        pi_score[:, i] = pis
        a = kernel.diffusion_matrix(Z[:, i])
        dM = Z[:, i + 1] - Z[:, i] - (kernel.drift(Z[:, i]) + np.einsum("pij,pj->pi", a, pis)) * dts[i]
        M[:, i + 1] = M[:, i] + dM
        B[:, i + 1] = B[:, i] + np.einsum("pij,pj->pi", _inverse_sqrt(a), dM)
    return InnovationRecord(path.grid, M, B, pi_score)


@dataclass
class MartingaleStats:
    s: float
    t: float
    paths: int
    mean: List[float]
    standard_error: List[float]
    unconditional_pass: bool
    bin_means: List[float]
    bin_standard_errors: List[float]
    bins_pass: bool
    qv_mean: float
    qv_target: float
    qv_pass: bool

    @property
    def passed(self) -> bool:
        return self.unconditional_pass and self.bins_pass and self.qv_pass

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _within(mean, se, k=4.0) -> bool:
    return bool(np.all(np.abs(mean) <= k * se))


def martingale_test(paths: RmbPath, kernel: TransitionKernel, prior: Prior, z0=None,
                    s: float = 0.2, t: float = 0.6, bins: int = 10,
                    record: Optional[InnovationRecord] = None) -> MartingaleStats:
    """Tests E[M_t - M_s | F_s] = 0 and the quadratic variation of B.

    The unconditional mean and the per-bin means (bins are quantiles of the
    first coordinate of Z_s) must lie within 4 standard errors of zero;
    the ensemble mean of sum (dB)^2 over (s, t] must lie within 5% of (t - s) n.
    """
    if paths.n_paths < MIN_MARTINGALE_PATHS:
        raise DomainError(f"martingale_test needs at least {MIN_MARTINGALE_PATHS} paths, got {paths.n_paths}")
    if not s <= t:
        raise DomainError(f"need s <= t, got s={s}, t={t}")
    i, j = paths.index_of(s), paths.index_of(t)
    rec = innovation_path(paths, kernel, prior, z0) if record is None else record
    inc = rec.M[:, j] - rec.M[:, i]
    n_paths, n = inc.shape
    mean = inc.mean(axis=0)
    se = inc.std(axis=0, ddof=1) / np.sqrt(n_paths)
    uncond = _within(mean, se)

    zs = paths.values[:, i, 0]
    edges = np.quantile(zs, np.linspace(0, 1, bins + 1))
    which = np.clip(np.searchsorted(edges, zs, side="right") - 1, 0, bins - 1)
    bin_means, bin_ses = [], []
    for b in range(bins):
        sel = inc[which == b, 0]
        if len(sel) < 2:
            continue
        bin_means.append(float(sel.mean()))
        bin_ses.append(float(sel.std(ddof=1) / np.sqrt(len(sel))))
    bins_ok = _within(np.array(bin_means), np.array(bin_ses))

    dB = np.diff(rec.B[:, i: j + 1], axis=1)
    qv = float(np.mean(np.sum(dB**2, axis=(1, 2))))
    target = (t - s) * n
    qv_ok = abs(qv - target) <= 0.05 * target
    return MartingaleStats(s, t, n_paths, mean.tolist(), se.tolist(), uncond, bin_means, bin_ses,
                           bins_ok, qv, target, qv_ok)
