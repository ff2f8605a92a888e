"""CLI tests: schema validation with field paths, artifact layout, exit codes,
and bit-identical summaries under a fixed seed."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from datamarket.cli import ConfigError, main, validate_config

TINY_MENU_RUN = {
    "mode": "single-menu",
    "setting": "A",
    "seed": 7,
    "test_size": 2000,
    "overrides": {"entries": 16, "batch": 512, "iterations": 150},
}

TINY_ORACLE_RUN = {
    "mode": "oracle-only",
    "setting": "H",
    "alpha": 0.5,
    "seed": 3,
    "mc_profiles": 50000,
}

TINY_MARKET_RUN = {
    "mode": "ex_post",
    "setting": "H",
    "alpha": 0.5,
    "seed": 5,
    "test_size": 500,
    "mc_profiles": 10000,
    "overrides": {"iterations": 30, "batch": 32, "misreport_inits": 4, "hidden": [8, 8]},
    "regret": {"candidates": 8, "ascent_steps": 0},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestValidation:
    def test_valid_run_config(self):
        assert validate_config(TINY_MENU_RUN) == "run"

    def test_unknown_key_reports_path(self):
        with pytest.raises(ConfigError) as err:
            validate_config({**TINY_MENU_RUN, "overrides": {"batchh": 4}})
        assert err.value.field_path == "overrides.batchh"

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            validate_config({"mode": "nope", "setting": "A"})

    def test_missing_env_and_setting(self):
        with pytest.raises(ConfigError):
            validate_config({"mode": "ex_post"})

    def test_explicit_env_schema(self):
        cfg = {
            "mode": "oracle-only",
            "env": {
                "n": 2,
                "m": 2,
                "alpha": 0.5,
                "v_dists": [{"kind": "uniform", "params": [0, 1]}] * 2,
                "theta_dists": [{"kind": "point_mass", "params": [0.5]}] * 2,
            },
        }
        assert validate_config(cfg) == "run"
        cfg["env"]["v_dists"][0] = {"kind": "uniform", "params": [0, 1], "oops": 1}
        with pytest.raises(ConfigError) as err:
            validate_config(cfg)
        assert "v_dists[0].oops" in err.value.field_path

    def test_sweep_and_table_kinds(self):
        assert validate_config({"sweep": "alpha", "setting": "H", "mode": "oracle", "alphas": [0.5]}) == "sweep"
        assert validate_config({"cells": [{"setting": "H", "mode": "ex_post", "alpha": 0.5}]}) == "table"

    def test_validate_command_exit_codes(self, tmp_path):
        good = write_config(tmp_path, TINY_ORACLE_RUN)
        assert main(["validate", good]) == 0
        bad = write_config(tmp_path, {"mode": "nope"}, "bad.json")
        assert main(["validate", bad]) == 2
        assert main(["validate", str(tmp_path / "missing.json")]) == 2

    def test_shipped_configs_validate(self):
        config_dir = Path(__file__).resolve().parents[1] / "configs"
        shipped = sorted(config_dir.glob("*.json"))
        assert shipped, "expected shipped configs"
        for path in shipped:
            assert main(["validate", str(path)]) == 0, path.name


class TestRun:
    def test_oracle_only_run(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY_ORACLE_RUN)
        out = tmp_path / "out"
        assert main(["run", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert abs(summary["revenue"] - 0.2708) < 0.02
        assert (out / "config.resolved.json").exists()

    def test_menu_run_artifacts_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path, TINY_MENU_RUN)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["run", cfg, "--out", str(out1)]) == 0
        assert main(["run", cfg, "--out", str(out2)]) == 0
        s1 = (out1 / "summary.json").read_bytes()
        s2 = (out2 / "summary.json").read_bytes()
        assert s1 == s2
        assert (out1 / "menu.csv").read_text().startswith("entry_id,price,q,usage_fraction")
        assert (out1 / "train_log.csv").exists()

    def test_market_run_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, TINY_MARKET_RUN)
        out = tmp_path / "m"
        assert main(["run", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"revenue", "regret", "opt_revenue"} <= set(summary)
        assert (out / "weights.bin").exists()
        assert (out / "weights.bin.json").exists()

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path, TINY_ORACLE_RUN)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["run", cfg, "--out", str(out1), "--seed", "11"])
        main(["run", cfg, "--out", str(out2), "--seed", "12"])
        r1 = json.loads((out1 / "summary.json").read_text())["revenue"]
        r2 = json.loads((out2 / "summary.json").read_text())["revenue"]
        assert r1 != r2

    def test_divergence_exit_code(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {**TINY_MENU_RUN, "overrides": {**TINY_MENU_RUN["overrides"], "lr": 1e38, "iterations": 10}},
        )
        assert main(["run", cfg, "--out", str(tmp_path / "d")]) == 3

    def test_wrong_kind_for_command(self, tmp_path):
        cfg = write_config(tmp_path, TINY_ORACLE_RUN)
        assert main(["table", cfg, "--out", str(tmp_path / "t")]) == 2


class TestSweepCommand:
    def test_alpha_sweep_oracle(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {"sweep": "alpha", "setting": "H", "mode": "oracle", "alphas": [0.5, 2.0], "seed": 1, "mc_profiles": 50000},
        )
        out = tmp_path / "s"
        assert main(["sweep", cfg, "--out", str(out)]) == 0
        text = (out / "sweep.csv").read_text()
        assert text.splitlines()[0].startswith("alpha,revenue")
        assert len(text.strip().splitlines()) == 3


class TestConsoleEntry:
    def test_module_invocation(self, tmp_path):
        cfg = write_config(tmp_path, TINY_ORACLE_RUN)
        proc = subprocess.run(
            [sys.executable, "-m", "datamarket.cli", "validate", cfg],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "ok" in proc.stdout
