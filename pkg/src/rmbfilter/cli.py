"""Command line runner: one subcommand per experiment, outputs to a directory.

Usage::

    rmbfilter SUBCOMMAND --config FILE --out DIR [--seed N] [--threads N]

Exit status: 0 when every check passes, 1 when a check fails, 2 for an
invalid configuration and 3 for a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import __version__
from .bridge import BridgeSpec, simulate, uniform_grid
from .config import ExperimentConfig, load_config
from .dynamics import (
    integrability_estimate,
    filter_trajectory,
    innovation_path,
    martingale_test,
    residual_convergence,
)
from .errors import ConfigError, RMBError, UnsupportedOperationError
from .filter import FilterInput, posterior, posterior_weights, rmb_ck_residual, terminal_limit_gap
from .kernels import ck_residual
from .oracle import abc_posterior, telescoping_posterior
from .statespace import Prior, total_variation

log = logging.getLogger("rmbfilter")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

Check = Dict[str, object]


def check(name: str, value, tolerance, passed: bool) -> Check:
    return {"name": name, "value": value, "tolerance": tolerance, "passed": bool(passed)}


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _state_cells(cfg: ExperimentConfig, state) -> List[str]:
    space = cfg.kernel.space
    if space.is_finite:
        return [_fmt(space.points[int(state)])]
    return [_fmt(v) for v in np.asarray(state).reshape(-1)]


def _state_cols(cfg: ExperimentConfig, name: str) -> List[str]:
    n = cfg.kernel.dimension
    return [name] if n == 1 else [f"{name}_{i}" for i in range(n)]


def _atom_cell(cfg: ExperimentConfig, state) -> str:
    return ";".join(_state_cells(cfg, state))


def write_csv(path: Path, cfg: ExperimentConfig, header: List[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# rmbfilter {__version__} config_sha256={cfg.sha256} seed={cfg.seed}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _one_path(cfg: ExperimentConfig, section: str):
    sec = cfg.section(section)
    n = sec["path_id"] + 1
    paths = simulate(cfg.spec, cfg.grid, n, cfg.seed, sec["mode"], cfg.workers)
    return paths.select(slice(sec["path_id"], sec["path_id"] + 1))


# subcommands: each returns (files written, checks, details)


def cmd_simulate(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("simulate")
    paths = simulate(cfg.spec, cfg.grid, sec["paths"], cfg.seed, sec["mode"], cfg.workers)
    header = ["path_id", "t"] + _state_cols(cfg, "z") + _state_cols(cfg, "x_pin")

    def rows():
        for p in range(paths.n_paths):
            pin = _state_cells(cfg, paths.hidden_pin[p])
            for i, t in enumerate(paths.grid):
                yield [str(p), _fmt(t)] + _state_cells(cfg, paths.values[p, i]) + pin

    write_csv(out / "paths.csv", cfg, header, rows())
    details = {"paths": paths.n_paths, "mode": sec["mode"]}
    if paths.clamp_count is not None:
        details["drift_cap"] = paths.drift_cap
        details["clamp_triggers"] = int(paths.clamp_count.sum())
    return ["paths.csv"], [], details


def _trajectory_weights(cfg, path):
    z0 = path.values[0, 0]
    return [posterior_weights(cfg.kernel, cfg.prior, cfg.T, z0, t, path.values[0, i])
            for i, t in enumerate(path.grid)]


def cmd_filter(cfg: ExperimentConfig, out: Path):
    path = _one_path(cfg, "filter")
    weights = _trajectory_weights(cfg, path)
    atoms = [_atom_cell(cfg, a) for a in cfg.prior.support]

    def rows():
        for t, w in zip(path.grid, weights):
            for atom, wi in zip(atoms, w):
                yield [_fmt(t), atom, _fmt(wi)]

    write_csv(out / "posterior.csv", cfg, ["t", "atom", "weight"], rows())
    return ["posterior.csv"], [], {"path_id": cfg.section("filter")["path_id"],
                                   "hidden_pin": _atom_cell(cfg, path.hidden_pin[0])}


def cmd_price(cfg: ExperimentConfig, out: Path):
    path = _one_path(cfg, "price")
    weights = _trajectory_weights(cfg, path)
    fv = np.array([cfg.payoff(cfg.prior.space.label(a)) for a in cfg.prior.support])
    rows = [[_fmt(t), _fmt(np.exp(-cfg.rate * (cfg.T - t)) * float(w @ fv))]
            for t, w in zip(path.grid, weights)]
    write_csv(out / "price.csv", cfg, ["t", "price"], rows)
    return ["price.csv"], [], {"path_id": cfg.section("price")["path_id"], "rate": cfg.rate}


def _random_states(cfg, rng, size):
    space = cfg.kernel.space
    if space.is_finite:
        return rng.integers(0, space.size, size)
    return cfg.y0 + np.sqrt(cfg.T) * rng.standard_normal((size, cfg.kernel.dimension))


def cmd_verify_ck(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("verify_ck")
    finite = cfg.kernel.space.is_finite
    ktol = sec["kernel_tol"] if sec["kernel_tol"] is not None else (1e-12 if finite else 1e-8)
    rtol = sec["rmb_tol"] if sec["rmb_tol"] is not None else (1e-10 if finite else 1e-7)
    rng = np.random.default_rng([cfg.seed, 1])
    T = cfg.T
    kres = []
    xs, zs = _random_states(cfg, rng, sec["samples"]), _random_states(cfg, rng, sec["samples"])
    for i in range(sec["samples"]):
        total = rng.uniform(0.02 * T, T)
        s = rng.uniform(0.01 * T, total - 0.01 * T)
        kres.append(ck_residual(cfg.kernel, s, total - s, xs[i], zs[i], sec["nodes"]))
    rres = []
    xs, zs = _random_states(cfg, rng, sec["rmb_samples"]), _random_states(cfg, rng, sec["rmb_samples"])
    for i in range(sec["rmb_samples"]):
        s, t, u = np.sort(rng.uniform(0.01 * T, 0.99 * T, 3))
        rres.append(rmb_ck_residual(cfg.kernel, cfg.prior, cfg.y0, s, t, u, xs[i], zs[i], sec["nodes"]))
    checks = [check("kernel_ck_max_residual", max(kres), ktol, max(kres) <= ktol),
              check("rmb_ck_max_residual", max(rres), rtol, max(rres) <= rtol)]
    write_json_report(out, "verify-ck", cfg, checks, {"kernel_residuals": kres, "rmb_residuals": rres})
    return ["verify-ck.json"], checks, None


def _residual_cmd(cfg: ExperimentConfig, out: Path, equation: str):
    name = f"verify_{equation}"
    sec = cfg.section(name)
    rep = residual_convergence(cfg.spec, cfg.payoff, sec["step_sizes"], sec["t"], sec["paths"], cfg.seed,
                               equation, sec["mode"], cfg.workers)
    lo, hi = sec["order_band"]
    checks = [check("rms_strictly_decreasing", rep.rms, None, rep.monotone),
              check("convergence_order", rep.order, [lo, hi], lo <= rep.order <= hi)]
    details = {"report": rep.to_dict()}
    files = []
    if equation == "ks" and sec["degenerate_paths"]:
        atom = cfg.prior.support[int(np.argmax(cfg.prior.weights))]
        delta = Prior(atom.reshape(1, -1) if atom.ndim else atom.reshape(1), [1.0], cfg.prior.space)
        spec = BridgeSpec(cfg.kernel, cfg.y0, delta)
        grid = np.linspace(0.0, sec["t"], int(round(sec["t"] / max(sec["step_sizes"]))) + 1)
        paths = simulate(spec, grid, sec["degenerate_paths"], cfg.seed, sec["mode"], cfg.workers)
        traj = filter_trajectory(paths, cfg.kernel, delta, cfg.payoff, cfg.y0, cfg.T)
        worst = float(np.max(np.abs(traj.ks_residual())))
        integrand = float(np.max(np.abs(traj.ks_integrand)))
        tol = sec["degenerate_tol"]
        checks.append(check("degenerate_prior_ks_residual", worst, tol, worst <= tol))
        checks.append(check("degenerate_prior_ks_integrand", integrand, tol, integrand <= tol))
    if sec["per_path"]:
        grid = np.linspace(0.0, sec["t"], int(round(sec["t"] / min(sec["step_sizes"]))) + 1)
        paths = simulate(cfg.spec, grid, sec["paths"], cfg.seed, sec["mode"], cfg.workers)
        traj = filter_trajectory(paths, cfg.kernel, cfg.prior, cfg.payoff, cfg.y0, cfg.T)
        res = traj.zakai_residual() if equation == "zakai" else traj.ks_residual()
        fname = f"verify-{equation}-residuals.csv"
        write_csv(out / fname, cfg, ["path_id", "residual"], ([str(i), _fmt(r)] for i, r in enumerate(res)))
        files.append(fname)
    write_json_report(out, f"verify-{equation}", cfg, checks, details)
    return [f"verify-{equation}.json"] + files, checks, None


def cmd_verify_zakai(cfg, out):
    return _residual_cmd(cfg, out, "zakai")


def cmd_verify_ks(cfg, out):
    return _residual_cmd(cfg, out, "ks")


def cmd_verify_martingale(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("verify_martingale")
    steps = int(round(sec["t"] / sec["dt"]))
    grid = np.linspace(0.0, sec["t"], steps + 1)
    paths = simulate(cfg.spec, grid, sec["paths"], cfg.seed, "exact-bridge", cfg.workers)
    rec = innovation_path(paths, cfg.kernel, cfg.prior, cfg.y0)
    stats = martingale_test(paths, cfg.kernel, cfg.prior, cfg.y0, sec["s"], sec["t"], sec["bins"], rec)
    checks = [check("unconditional_mean_within_4se", stats.mean, stats.standard_error, stats.unconditional_pass),
              check("binned_means_within_4se", stats.bin_means, stats.bin_standard_errors, stats.bins_pass),
              check("b_quadratic_variation", stats.qv_mean, [stats.qv_target, 0.05], stats.qv_pass)]
    write_json_report(out, "verify-martingale", cfg, checks, {"stats": stats.to_dict()})
    return ["verify-martingale.json"], checks, None


def cmd_verify_limits(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("verify_limits")
    T = cfg.T
    zs = cfg.y0 if sec["zs"] is None else cfg.kernel.space.as_state(sec["zs"])
    gaps = [terminal_limit_gap(cfg.kernel, cfg.prior, cfg.y0, sec["s"], zs, T - d, sec["window_constant"])
            for d in sec["distances"]]
    checks = [check("limit_gap_decreasing", gaps, None, all(b < a for a, b in zip(gaps, gaps[1:])) or
                    all(g <= 1e-15 for g in gaps)),
              check("limit_gap_last", gaps[-1], sec["gap_tol"], gaps[-1] <= sec["gap_tol"])]
    revelation = []
    scale = 1.0
    if cfg.kernel.is_diffusion:
        scale = float(np.linalg.norm(cfg.kernel.sigma(np.asarray(cfg.y0, dtype=float)), 2))
    for k, eps in enumerate(sec["epsilons"]):
        grid = uniform_grid(T, sec["steps"], eps)
        paths = simulate(cfg.spec, grid, sec["paths"], cfg.seed + k, "exact-bridge", cfg.workers)
        last = paths.values[:, -1]
        if cfg.kernel.space.is_finite:
            dist = float(np.mean(last != paths.hidden_pin))
        else:
            dist = float(np.mean(np.linalg.norm(last - paths.hidden_pin, axis=-1)))
        bound = 3.0 * np.sqrt(eps) * scale
        revelation.append({"epsilon": eps, "mean_distance": dist, "bound": bound})
        checks.append(check(f"terminal_revelation_eps_{eps:g}", dist, bound, dist <= bound))
    d = sec["concentration_distance"]
    grid = uniform_grid(T, sec["steps"], d)
    paths = simulate(cfg.spec, grid, sec["paths"], cfg.seed + 101, "exact-bridge", cfg.workers)
    w = posterior_weights(cfg.kernel, cfg.prior, T, cfg.y0, grid[-1], paths.values[:, -1])
    support = cfg.prior.support
    if cfg.kernel.space.is_finite:
        hit = support[None, :] == paths.hidden_pin[:, None]
    else:
        hit = np.all(support[None, :, :] == paths.hidden_pin[:, None, :], axis=-1)
    mass = float(np.mean(np.sum(w * hit, axis=1)))
    checks.append(check("posterior_mass_on_true_pin", mass, sec["concentration_tol"], mass >= sec["concentration_tol"]))
    write_json_report(out, "verify-limits", cfg, checks, {"gaps": dict(zip(map(str, sec["distances"]), gaps)),
                                                           "revelation": revelation})
    return ["verify-limits.json"], checks, None


def _relative_errors(a, b):
    a, b = np.asarray(a), np.asarray(b)
    both_zero = (a == 0) & (b == 0)
    rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-300)
    return np.where(both_zero, 0.0, rel)


def cmd_oracle_compare(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("oracle_compare")
    T = cfg.T
    grid = uniform_grid(T, sec["observations"], cfg.epsilon)
    paths = simulate(cfg.spec, grid, sec["paths"], cfg.seed, "exact-bridge", cfg.workers)
    worst, worst_tv = 0.0, 0.0
    for p in range(paths.n_paths):
        obs = list(zip(grid, paths.values[p]))
        tele = telescoping_posterior(cfg.kernel, cfg.prior, obs, T)
        closed = posterior(FilterInput(cfg.kernel, cfg.prior, cfg.y0, grid[-1], paths.values[p, -1], T))
        worst = max(worst, float(np.max(_relative_errors(tele.weights, closed.weights))))
        worst_tv = max(worst_tv, total_variation(tele, closed))
    checks = [check("telescoping_max_relative_error", worst, sec["telescoping_tol"], worst <= sec["telescoping_tol"])]
    details = {"telescoping_max_tv": worst_tv, "telescoping_paths": paths.n_paths}
    t_abc = T / 2 if sec["abc_t"] is None else float(sec["abc_t"])
    zt = cfg.y0 if sec["abc_zt"] is None else cfg.kernel.space.as_state(sec["abc_zt"])
    abc = abc_posterior(cfg.kernel, cfg.prior, cfg.y0, T, t_abc, zt, sec["abc_window"], sec["abc_paths"],
                        cfg.seed, cfg.workers)
    closed = posterior(FilterInput(cfg.kernel, cfg.prior, cfg.y0, t_abc, zt, T))
    tv = total_variation(abc.posterior, closed)
    checks.append(check("abc_total_variation", tv, sec["abc_tol"], tv <= sec["abc_tol"]))
    details.update({"abc_accepted": abc.accepted, "abc_paths": abc.n_paths, "abc_window": abc.window,
                    "abc_weights": abc.posterior.weights.tolist(), "closed_form_weights": closed.weights.tolist()})
    write_json_report(out, "oracle-compare", cfg, checks, details)
    return ["oracle-compare.json"], checks, None


def cmd_check_2_5(cfg: ExperimentConfig, out: Path):
    sec = cfg.section("check_2_5")
    est = integrability_estimate(cfg.kernel, cfg.prior, cfg.y0, sec["t"], cfg.payoff, sec["paths"],
                                 cfg.seed, sec["steps"], cfg.workers)
    checks = [check("finite_estimate", est.value, None, bool(np.isfinite(est.value))),
              check("not_divergent", est.divergent, False, not est.divergent)]
    write_json_report(out, "check-2-5", cfg, checks, {"estimate": est.to_dict()})
    return ["check-2-5.json"], checks, None


COMMANDS: Dict[str, Callable] = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "price": cmd_price,
    "verify-ck": cmd_verify_ck,
    "verify-zakai": cmd_verify_zakai,
    "verify-ks": cmd_verify_ks,
    "verify-martingale": cmd_verify_martingale,
    "verify-limits": cmd_verify_limits,
    "oracle-compare": cmd_oracle_compare,
    "check-2-5": cmd_check_2_5,
}


def write_json_report(out: Path, name: str, cfg: ExperimentConfig, checks: List[Check], details) -> None:
    payload = {
        "tool": "rmbfilter",
        "version": __version__,
        "subcommand": name,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
        "details": details,
        "timing_file": "timing.json",
    }
    write_json(out / f"{name}.json", payload)


def run(subcommand: str, config_path, out_dir, seed=None, threads=None) -> int:
    """Run one subcommand; returns the process exit status."""
    if subcommand not in COMMANDS:
        log.error("unknown subcommand %s", subcommand)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path, seed=seed, workers=threads)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        files, checks, _ = COMMANDS[subcommand](cfg, out)
    except (ConfigError, UnsupportedOperationError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (RMBError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    write_json(out / "timing.json", {"subcommand": subcommand, "wall_clock_seconds": time.perf_counter() - start,
                                     "workers": cfg.workers, "files": files})
    failed = [c["name"] for c in checks if not c["passed"]]
    for c in checks:
        log.info("%s %s: %s (tolerance %s)", "PASS" if c["passed"] else "FAIL", c["name"], c["value"], c["tolerance"])
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmbfilter", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="worker threads over path blocks")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return run(args.subcommand, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
