import csv
import json
import logging
from pathlib import Path

import pytest
import yaml

from rmbfilter.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main, run
from rmbfilter.config import load_config, make_payoff
from rmbfilter.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = {
    "seed": 3, "T": 1.0, "epsilon": 1e-3, "y0": 0.0,
    "kernel": {"kind": "brownian"},
    "prior": {"kind": "atomic", "points": [-1.0, 1.0]},
    "grid": {"steps": 100},
    "simulate": {"paths": 5},
}


def write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# rmbfilter ")
    return list(csv.DictReader(lines[1:]))


class TestConfig:
    def test_shipped_configs_load(self):
        for path in sorted(CONFIGS.glob("*.yaml")):
            cfg = load_config(path)
            assert cfg.grid[-1] == pytest.approx(cfg.T - cfg.epsilon)

    def test_negative_horizon_names_field(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            load_config(write(tmp_path, {**BASE, "T": -1}))
        assert err.value.field.startswith("T")
        assert "line" in str(err.value)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="bogus"):
            load_config(write(tmp_path, {**BASE, "bogus": 1}))

    def test_unknown_section_key(self, tmp_path):
        with pytest.raises(ConfigError, match="simulate.pathz"):
            load_config(write(tmp_path, {**BASE, "simulate": {"pathz": 3}}))

    def test_seed_override(self, tmp_path):
        assert load_config(write(tmp_path, BASE), seed=99).seed == 99

    def test_payoffs(self):
        assert make_payoff("square")(3.0) == 9.0
        assert make_payoff({"call": 1.0})(1.5) == 0.5
        assert make_payoff({"indicator": [0, 1]})(2.0) == 0.0
        with pytest.raises(ConfigError):
            make_payoff("straddle")


class TestRun:
    def test_simulate(self, tmp_path):
        assert run("simulate", write(tmp_path, BASE), tmp_path / "out") == EXIT_OK
        rows = read_csv(tmp_path / "out" / "paths.csv")
        assert len({r["path_id"] for r in rows}) == 5
        assert json.loads((tmp_path / "out" / "timing.json").read_text())["subcommand"] == "simulate"

    def test_degenerate_filter_is_constant(self, tmp_path):
        cfg = {**BASE, "prior": {"kind": "atomic", "points": [0.7]}}
        assert run("filter", write(tmp_path, cfg), tmp_path / "out") == EXIT_OK
        rows = read_csv(tmp_path / "out" / "posterior.csv")
        assert {r["atom"] for r in rows} == {"0.7"}
        assert {float(r["weight"]) for r in rows} == {1.0}

    def test_price_discounting(self, tmp_path):
        cfg = {**BASE, "prior": {"kind": "atomic", "points": [2.0]}, "rate": 0.1}
        assert run("price", write(tmp_path, cfg), tmp_path / "out") == EXIT_OK
        rows = read_csv(tmp_path / "out" / "price.csv")
        import math
        for r in rows[::20]:
            assert float(r["price"]) == pytest.approx(2.0 * math.exp(-0.1 * (1.0 - float(r["t"]))), rel=1e-12)

    def test_verify_ck(self, tmp_path):
        assert run("verify-ck", write(tmp_path, BASE), tmp_path / "out") == EXIT_OK
        report = json.loads((tmp_path / "out" / "verify-ck.json").read_text())
        assert report["passed"] and all(c["value"] <= c["tolerance"] for c in report["checks"])

    def test_bad_config_exit(self, tmp_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert run("filter", write(tmp_path, {**BASE, "T": -1.0}), tmp_path / "out") == EXIT_CONFIG
        assert "T (line" in caplog.text

    def test_missing_file(self, tmp_path):
        assert run("filter", tmp_path / "nope.yaml", tmp_path / "out") == EXIT_CONFIG

    def test_diffusion_only_on_chain(self, tmp_path):
        assert run("verify-zakai", CONFIGS / "finite_chain.yaml", tmp_path / "out") == EXIT_CONFIG

    def test_failed_check_exit(self, tmp_path):
        cfg = {**BASE, "verify_ck": {"samples": 5, "rmb_samples": 3, "nodes": 4}}
        assert run("verify-ck", write(tmp_path, cfg), tmp_path / "out") == EXIT_CHECK

    def test_main_accepts_run_prefix(self, tmp_path):
        cfg = write(tmp_path, BASE)
        assert main(["run", "simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "p"), "--seed", "4"]) == EXIT_OK
        assert (tmp_path / "o" / "paths.csv").read_text() != (tmp_path / "p" / "paths.csv").read_text()
