"""Experiment configuration: a YAML file validated into library objects.

Unknown keys are rejected at every level.  Errors name the dotted field
path and, when the field is present in the file, its line number.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
import yaml

from .bridge import DEFAULT_EPSILON_FRACTION, SAMPLERS, BridgeSpec, check_grid, uniform_grid
from .errors import ConfigError, RMBError
from .kernels import BrownianKernel, FiniteChainKernel, OrnsteinUhlenbeckKernel, TransitionKernel
from .statespace import Prior, make_atomic_prior, make_density_prior

TOP_KEYS = {"seed", "T", "epsilon", "y0", "rate", "payoff", "workers", "kernel", "prior", "grid",
            "simulate", "filter", "price", "verify_ck", "verify_zakai", "verify_ks",
            "verify_martingale", "verify_limits", "oracle_compare", "check_2_5"}

KERNEL_KEYS = {
    "brownian": {"kind", "drift", "vol"},
    "ou": {"kind", "theta", "mu", "sigma"},
    "finite_chain": {"kind", "generator", "points"},
}
PRIOR_KEYS = {
    "atomic": {"kind", "points", "weights"},
    "density": {"kind", "name", "mean", "sd", "nodes", "box"},
}

# subcommand section: key -> default
SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "simulate": {"paths": 100, "mode": "exact-bridge"},
    "filter": {"path_id": 0, "mode": "exact-bridge"},
    "price": {"path_id": 0, "mode": "exact-bridge"},
    "verify_ck": {"samples": 50, "rmb_samples": 20, "nodes": 256,
                  "kernel_tol": None, "rmb_tol": None},
    "verify_zakai": {"paths": 200, "t": 0.8, "step_sizes": [1e-2, 1e-3, 1e-4],
                     "order_band": [0.35, 0.75], "mode": "exact-bridge", "per_path": False},
    "verify_ks": {"paths": 200, "t": 0.8, "step_sizes": [1e-2, 1e-3, 1e-4],
                  "order_band": [0.35, 0.75], "mode": "exact-bridge", "per_path": False,
                  "degenerate_paths": 20, "degenerate_tol": 1e-12},
    "verify_martingale": {"paths": 10000, "s": 0.2, "t": 0.6, "dt": 1e-3, "bins": 10},
    "verify_limits": {"s": 0.5, "zs": None, "distances": [1e-2, 1e-4, 1e-6],
                      "window_constant": 0.1, "gap_tol": 0.01,
                      "epsilons": [1e-2, 1e-3, 1e-4], "paths": 1000, "steps": 200,
                      "concentration_distance": 1e-4, "concentration_tol": 0.99},
    "oracle_compare": {"paths": 100, "observations": 50, "telescoping_tol": 1e-10,
                       "abc_t": None, "abc_zt": None, "abc_window": 0.02,
                       "abc_paths": 1_000_000, "abc_tol": 0.05},
    "check_2_5": {"t": 0.9, "paths": 1000, "steps": 1000},
}

PAYOFFS = ("identity", "square", "indicator", "call")


def _first(x):
    return float(x) if np.ndim(x) == 0 else float(np.asarray(x).reshape(-1)[0])


def make_payoff(spec) -> Callable:
    """Named payoffs; vector states use their first coordinate."""
    if isinstance(spec, str):
        name, args = spec, []
    elif isinstance(spec, dict) and len(spec) == 1:
        name, args = next(iter(spec.items()))
        args = args if isinstance(args, list) else [args]
    else:
        raise ConfigError(f"expected one of {PAYOFFS}", "payoff")
    if name == "identity" and not args:
        return _first
    if name == "square" and not args:
        return lambda x: _first(x) ** 2
    if name == "indicator" and len(args) == 2:
        a, b = float(args[0]), float(args[1])
        return lambda x: 1.0 if a <= _first(x) <= b else 0.0
    if name == "call" and len(args) == 1:
        k = float(args[0])
        return lambda x: max(_first(x) - k, 0.0)
    raise ConfigError(f"unknown payoff {spec!r}; expected one of {PAYOFFS}", "payoff")


def _line_index(node, prefix="", out=None) -> Dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_index(value, path, out)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    sha256: str
    seed: int
    T: float
    epsilon: float
    rate: float
    workers: int
    kernel: TransitionKernel
    prior: Prior
    y0: Any
    payoff: Callable
    payoff_name: Any
    grid: np.ndarray
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def spec(self) -> BridgeSpec:
        return BridgeSpec(self.kernel, self.y0, self.prior)

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections[name]


class _Validator:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, field_name, message):
        line = self.lines.get(field_name)
        where = f"{field_name} (line {line})" if line else field_name
        raise ConfigError(message, where)

    def keys(self, mapping, allowed, prefix):
        if not isinstance(mapping, dict):
            self.fail(prefix or "<root>", "expected a mapping")
        for key in mapping:
            if key not in allowed:
                name = f"{prefix}.{key}" if prefix else str(key)
                self.fail(name, f"unknown key; allowed: {sorted(allowed)}")

    def number(self, value, name, positive=False, nonneg=False, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(name, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            self.fail(name, "must be finite")
        if integer and int(value) != value:
            self.fail(name, "must be an integer")
        if positive and not value > 0:
            self.fail(name, f"must be positive, got {value}")
        if nonneg and value < 0:
            self.fail(name, f"must be nonnegative, got {value}")
        return int(value) if integer else float(value)


def _build_kernel(v: _Validator, k: dict, T: float) -> TransitionKernel:
    v.keys(k, {"kind", "drift", "vol", "theta", "mu", "sigma", "generator", "points"}, "kernel")
    kind = k.get("kind")
    if kind not in KERNEL_KEYS:
        v.fail("kernel.kind", f"expected one of {sorted(KERNEL_KEYS)}, got {kind!r}")
    v.keys(k, KERNEL_KEYS[kind], "kernel")
    if kind == "brownian":
        return BrownianKernel(k.get("drift", 0.0), k.get("vol", 1.0), horizon=T)
    if kind == "ou":
        theta = v.number(k.get("theta", 1.0), "kernel.theta", positive=True)
        sigma = v.number(k.get("sigma", 1.0), "kernel.sigma", positive=True)
        mu = v.number(k.get("mu", 0.0), "kernel.mu")
        return OrnsteinUhlenbeckKernel(theta, mu, sigma, horizon=T)
    if "generator" not in k:
        v.fail("kernel.generator", "finite_chain needs a generator matrix")
    return FiniteChainKernel(k["generator"], horizon=T, points=k.get("points"))


def _density_fn(v: _Validator, p: dict):
    name = p.get("name", "normal")
    if name == "normal":
        mean = v.number(p.get("mean", 0.0), "prior.mean")
        sd = v.number(p.get("sd", 1.0), "prior.sd", positive=True)
        return lambda x: math.exp(-0.5 * ((x - mean) / sd) ** 2)
    if name == "uniform":
        return lambda x: 1.0
    v.fail("prior.name", f"expected normal or uniform, got {name!r}")


def _build_prior(v: _Validator, p: dict, kernel: TransitionKernel) -> Prior:
    v.keys(p, PRIOR_KEYS["atomic"] | PRIOR_KEYS["density"], "prior")
    kind = p.get("kind", "atomic")
    if kind not in PRIOR_KEYS:
        v.fail("prior.kind", f"expected atomic or density, got {kind!r}")
    v.keys(p, PRIOR_KEYS[kind], "prior")
    if kind == "atomic":
        if "points" not in p:
            v.fail("prior.points", "atomic prior needs points")
        return make_atomic_prior(p["points"], p.get("weights"), kernel.space)
    if kernel.space.is_finite or kernel.dimension != 1:
        v.fail("prior.kind", "density priors need a scalar continuum kernel")
    nodes = v.number(p.get("nodes", 64), "prior.nodes", integer=True)
    if "box" not in p:
        v.fail("prior.box", "density prior needs a box [lo, hi]")
    return make_density_prior(_density_fn(v, p), nodes, p["box"])


def _build_section(v: _Validator, name: str, given) -> Dict[str, Any]:
    defaults = SECTION_DEFAULTS[name]
    given = {} if given is None else given
    v.keys(given, set(defaults), name)
    out = dict(defaults)
    out.update(given)
    for key in ("paths", "samples", "rmb_samples", "nodes", "observations", "abc_paths", "steps",
                "bins", "degenerate_paths"):
        if key in out and out[key] is not None:
            out[key] = v.number(out[key], f"{name}.{key}", positive=True, integer=True)
    if "mode" in out and out["mode"] not in SAMPLERS:
        v.fail(f"{name}.mode", f"expected one of {SAMPLERS}")
    if "path_id" in out:
        out["path_id"] = v.number(out["path_id"], f"{name}.path_id", nonneg=True, integer=True)
    return out


def load_config(path, seed: Optional[int] = None, workers: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate an experiment file; `seed` and `workers` override the file."""
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<file>"
        raise ConfigError(f"invalid YAML: {exc}", where) from exc
    return build_config(raw if raw is not None else {}, _line_index(node) if node else {},
                        hashlib.sha256(text.encode()).hexdigest(), seed, workers)


def build_config(raw: dict, lines=None, sha256: str = "", seed: Optional[int] = None,
                 workers: Optional[int] = None) -> ExperimentConfig:
    v = _Validator(lines or {})
    v.keys(raw, TOP_KEYS, "")
    for key in ("T", "kernel", "prior", "y0"):
        if key not in raw:
            v.fail(key, "required")
    T = v.number(raw["T"], "T", positive=True)
    eps = v.number(raw.get("epsilon", DEFAULT_EPSILON_FRACTION * T), "epsilon", positive=True)
    if not eps < T:
        v.fail("epsilon", f"must be smaller than T={T}")
    rate = v.number(raw.get("rate", 0.0), "rate", nonneg=True)
    file_seed = v.number(raw.get("seed", 0), "seed", nonneg=True, integer=True)
    n_workers = v.number(raw.get("workers", 1), "workers", positive=True, integer=True)
    try:
        kernel = _build_kernel(v, raw["kernel"], T)
        prior = _build_prior(v, raw["prior"], kernel)
        y0 = kernel.space.as_state(raw["y0"])
    except ConfigError:
        raise
    except RMBError as exc:
        raise ConfigError(str(exc), "kernel/prior/y0") from exc
    grid_cfg = raw.get("grid", {"steps": 1000})
    v.keys(grid_cfg, {"steps", "times"}, "grid")
    try:
        if "times" in grid_cfg:
            grid = check_grid(grid_cfg["times"], T)
            if grid[-1] > T - eps:
                v.fail("grid.times", f"last time must be <= T - epsilon = {T - eps}")
        else:
            grid = uniform_grid(T, v.number(grid_cfg.get("steps", 1000), "grid.steps", positive=True,
                                            integer=True), eps)
    except ConfigError:
        raise
    except RMBError as exc:
        raise ConfigError(str(exc), "grid") from exc
    payoff_spec = raw.get("payoff", "identity")
    payoff = make_payoff(payoff_spec)
    sections = {name: _build_section(v, name, raw.get(name)) for name in SECTION_DEFAULTS}
    return ExperimentConfig(
        raw=raw, sha256=sha256, seed=file_seed if seed is None else int(seed), T=T, epsilon=eps,
        rate=rate, workers=n_workers if workers is None else int(workers), kernel=kernel,
        prior=prior, y0=y0, payoff=payoff, payoff_name=payoff_spec, grid=grid, sections=sections,
    )
