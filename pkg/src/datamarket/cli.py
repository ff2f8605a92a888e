"""Config-driven experiment runner.

Subcommands:
  run       train/evaluate one configuration, writing artifacts + summary.json
  validate  schema-check a config file and exit
  table     batch of multi-buyer cells -> one revenue/regret CSV
  sweep     externality or informativeness sweep -> CSV series

Configs are JSON with a strict schema (unknown keys are rejected, reported by
field path).  Exit codes: 0 success, 2 config error, 3 runtime divergence.
The environment variable DATAMARKET_THREADS caps --jobs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import evaluation, market, menu
from .dists import from_config as dist_from_config
from .econ import MarketEnv
from .menu import DivergenceError
from .oracle import VirtualValueMechanism, known_single_optimal

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.field_path = path


# ---------------------------------------------------------------------------
# schema validation
# ---------------------------------------------------------------------------

_DIST_KEYS = {"kind": str, "params": list}

_OVERRIDE_KEYS = {
    "iterations": int,
    "batch": int,
    "entries": int,
    "lr": float,
    "tau": float,
    "tau_start": float,
    "anneal_frac": float,
    "misreport_inits": int,
    "interim_samples": int,
    "hidden": list,
    "lambda_init": float,
    "penalty_coeff": float,
    "update_period": int,
}

_REGRET_KEYS = {
    "candidates": int,
    "ascent_steps": int,
    "ascent_lr": float,
    "sample_cap": int,
    "interim_samples": int,
}

_RUN_KEYS = {
    "mode": str,
    "setting": str,
    "param": float,
    "alpha": float,
    "theta1": float,
    "env": dict,
    "profile": str,
    "seed": int,
    "test_size": int,
    "mc_profiles": int,
    "ironed": bool,
    "emit_heatmap": bool,
    "overrides": dict,
    "regret": dict,
}

_SWEEP_KEYS = {
    "sweep": str,
    "setting": str,
    "family": str,
    "mode": str,
    "alphas": list,
    "grid": list,
    "theta1": float,
    "profile": str,
    "seed": int,
    "test_size": int,
    "mc_profiles": int,
    "overrides": dict,
}

_TABLE_KEYS = {
    "cells": list,
    "profile": str,
    "seed": int,
    "test_size": int,
    "oracle_profiles": int,
    "overrides": dict,
    "regret": dict,
}

_CELL_KEYS = {"setting": str, "mode": str, "alpha": float, "theta1": float}

_MODES = ("single-menu", "ex_post", "interim", "oracle-only")


def _check_keys(obj: dict, allowed: dict, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    for key, value in obj.items():
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
        want = allowed[key]
        if want is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key}" if path else key, "expected a number")
        elif want is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key}" if path else key, "expected an integer")
        elif not isinstance(value, want):
            raise ConfigError(f"{path}.{key}" if path else key, f"expected {want.__name__}")


def validate_config(cfg: dict) -> str:
    """Return the config kind ("run", "sweep", "table") or raise ConfigError."""
    if not isinstance(cfg, dict):
        raise ConfigError("", "config root must be an object")
    if "sweep" in cfg:
        _check_keys(cfg, _SWEEP_KEYS, "")
        if cfg["sweep"] == "alpha":
            for field in ("setting", "alphas", "mode"):
                if field not in cfg:
                    raise ConfigError(field, "required for alpha sweeps")
        elif cfg["sweep"] == "informativeness":
            for field in ("family", "grid"):
                if field not in cfg:
                    raise ConfigError(field, "required for informativeness sweeps")
            if cfg["family"] not in ("C", "D", "F"):
                raise ConfigError("family", "must be C, D, or F")
        else:
            raise ConfigError("sweep", "must be 'alpha' or 'informativeness'")
        return "sweep"
    if "cells" in cfg:
        _check_keys(cfg, _TABLE_KEYS, "")
        for idx, cell in enumerate(cfg["cells"]):
            _check_keys(cell, _CELL_KEYS, f"cells[{idx}]")
            for field in ("setting", "mode", "alpha"):
                if field not in cell:
                    raise ConfigError(f"cells[{idx}].{field}", "required")
        return "table"
    _check_keys(cfg, _RUN_KEYS, "")
    if "mode" not in cfg:
        raise ConfigError("mode", "required")
    if cfg["mode"] not in _MODES:
        raise ConfigError("mode", f"must be one of {_MODES}")
    if "setting" not in cfg and "env" not in cfg:
        raise ConfigError("setting", "either a setting id or an explicit env is required")
    if "env" in cfg:
        env_keys = {"n": int, "m": int, "alpha": float, "v_dists": list, "theta_dists": list}
        _check_keys(cfg["env"], env_keys, "env")
        for field in env_keys:
            if field not in cfg["env"]:
                raise ConfigError(f"env.{field}", "required")
        for group in ("v_dists", "theta_dists"):
            for idx, spec in enumerate(cfg["env"][group]):
                _check_keys(spec, _DIST_KEYS, f"env.{group}[{idx}]")
    if "overrides" in cfg:
        _check_keys(cfg["overrides"], _OVERRIDE_KEYS, "overrides")
    if "regret" in cfg:
        _check_keys(cfg["regret"], _REGRET_KEYS, "regret")
    return "run"


def _resolve_env(cfg: dict) -> MarketEnv:
    if "env" in cfg:
        spec = cfg["env"]
        return MarketEnv(
            n=spec["n"],
            m=spec["m"],
            alpha=float(spec["alpha"]),
            v_dists=tuple(dist_from_config(d) for d in spec["v_dists"]),
            theta_dists=tuple(dist_from_config(d) for d in spec["theta_dists"]),
        )
    setting = cfg["setting"]
    if cfg["mode"] == "single-menu":
        return evaluation.single_buyer_env(setting, cfg.get("param"))
    return evaluation.multi_buyer_env(setting, float(cfg.get("alpha", 0.5)), float(cfg.get("theta1", 0.5)))


def _menu_config(cfg: dict) -> menu.MenuTrainConfig:
    base = menu.DESK_MENU if cfg.get("profile", "desk") == "desk" else menu.PAPER_MENU
    over = {k: v for k, v in cfg.get("overrides", {}).items() if k in ("entries", "batch", "iterations", "lr", "tau", "tau_start", "anneal_frac")}
    return replace(base, **over)


def _market_config(cfg: dict) -> market.MarketTrainConfig:
    mode = cfg["mode"]
    if cfg.get("profile", "desk") == "desk":
        base = market.DESK_EXPOST if mode == "ex_post" else market.DESK_INTERIM
    else:
        base = market.PAPER_EXPOST if mode == "ex_post" else market.PAPER_INTERIM
    over = dict(cfg.get("overrides", {}))
    over.pop("entries", None)
    over.pop("tau", None)
    over.pop("tau_start", None)
    over.pop("anneal_frac", None)
    if "hidden" in over:
        over["hidden"] = tuple(int(h) for h in over["hidden"])
    return replace(base, **over)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _log_csv(log: list[dict]) -> str:
    if not log:
        return ""
    cols = list(log[0].keys())
    lines = [",".join(cols)]
    for row in log:
        lines.append(",".join(f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def run_config(cfg: dict, out_dir: Path) -> dict:
    env = _resolve_env(cfg)
    seed = int(cfg.get("seed", 0))
    test_size = int(cfg.get("test_size", 20000))
    mode = cfg["mode"]
    summary: dict = {"mode": mode, "setting": cfg.get("setting"), "seed": seed}
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "config.resolved.json", json.dumps(cfg, indent=1, sort_keys=True))

    if mode == "single-menu":
        mcfg = _menu_config(cfg)
        params, log = menu.train_menu(env, mcfg, seed)
        vt, tt = env.sample_profiles(test_size, seed=seed + 10_000)
        testset = (vt[:, 0], tt[:, 0])
        distilled = menu.distill_menu(params, testset)
        ev = menu.evaluate_menu(distilled.menu, testset)
        _write(out_dir / "train_log.csv", _log_csv(log))
        _write(out_dir / "menu.csv", distilled.menu.to_csv(distilled.usage))
        summary.update(
            revenue=ev.revenue,
            revenue_se=ev.revenue_se,
            ir_violations=ev.ir_violations,
            entries=len(distilled.menu.entries) - 1,
            prices=[p for _, p in distilled.menu.entries[1:]],
        )
        if cfg.get("setting") in ("A", "B"):
            ref = menu.evaluate_menu(known_single_optimal(cfg["setting"]), testset)
            summary["opt_revenue"] = ref.revenue
            summary["oracle_gap"] = ev.revenue - ref.revenue
    elif mode in ("ex_post", "interim"):
        tcfg = _market_config(cfg)
        weights, log = market.train_market(env, tcfg, seed)
        rev, se = market.evaluate_revenue(weights, env, test_size, seed=seed + 10_000)
        regret = market.estimate_regret_test(
            weights, env, test_size, seed=seed + 20_000, mode=tcfg.mode, **cfg.get("regret", {})
        )
        _write(out_dir / "train_log.csv", _log_csv(log))
        weights.params.save(out_dir / "weights.bin")
        summary.update(revenue=rev, revenue_se=se, regret=float(np.max(regret)))
        if cfg.get("emit_heatmap", False):
            grid = evaluation.correct_action_heatmap(market.LearnedMechanism(weights, env), env)
            _write(out_dir / "heatmap.csv", grid.to_csv())
        if mode == "ex_post":
            try:
                opt, _ = VirtualValueMechanism(env, ironed=bool(cfg.get("ironed", False))).mc_revenue(
                    int(cfg.get("mc_profiles", 10**6)), seed=seed + 30_000
                )
                summary["opt_revenue"] = opt
                summary["oracle_gap"] = rev - opt
            except Exception:
                pass
        else:
            ref = evaluation.REFERENCE_OPT_INTERIM.get(
                (cfg.get("setting"), float(cfg.get("alpha", 0.5)), float(cfg.get("theta1", 0.5)))
            )
            if ref is not None:
                summary["opt_revenue"] = ref
                summary["oracle_gap"] = rev - ref
    else:  # oracle-only
        mech = VirtualValueMechanism(env, ironed=bool(cfg.get("ironed", False)))
        rev, se = mech.mc_revenue(int(cfg.get("mc_profiles", 10**6)), seed=seed)
        summary.update(revenue=rev, revenue_se=se)
        if cfg.get("emit_heatmap", False):
            grid = evaluation.correct_action_heatmap(mech, env)
            _write(out_dir / "heatmap.csv", grid.to_csv())

    _write(out_dir / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# sweep / table (point-wise for --jobs)
# ---------------------------------------------------------------------------


def _sweep_point(args: tuple) -> dict:
    cfg, j = args
    seed = int(cfg.get("seed", 0))
    if cfg["sweep"] == "alpha":
        mode = cfg["mode"]
        mcfg = None
        if mode in ("ex_post", "interim"):
            mcfg = _market_config({**cfg, "mode": mode})
        return evaluation.alpha_sweep(
            cfg["setting"],
            [cfg["alphas"][j]],
            mode,
            mcfg,
            seed + 17 * j,
            theta1=float(cfg.get("theta1", 0.5)),
            test_size=int(cfg.get("test_size", 20000)),
            oracle_profiles=int(cfg.get("mc_profiles", 10**6)),
        )[0]
    mcfg = _menu_config(cfg)
    return evaluation.informativeness_sweep(
        cfg["family"], [cfg["grid"][j]], mcfg, seed + 23 * j, test_size=int(cfg.get("test_size", 20000))
    )[0]


def _table_point(args: tuple) -> evaluation.TableRow:
    cfg, j = args
    cell = cfg["cells"][j]
    cfg_expost = _market_config({**cfg, "mode": "ex_post"})
    cfg_interim = _market_config({**cfg, "mode": "interim"})
    return evaluation.revenue_and_regret_table(
        [cell],
        cfg_expost,
        cfg_interim,
        int(cfg.get("seed", 0)) + 101 * j,
        test_size=int(cfg.get("test_size", 20000)),
        oracle_profiles=int(cfg.get("oracle_profiles", 10**6)),
        regret_opts=cfg.get("regret"),
    )[0]


def _parallel_map(fn, tasks: list, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with get_context("spawn").Pool(processes=jobs) as pool:
        return pool.map(fn, tasks)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(path, "config file not found")
    except json.JSONDecodeError as err:
        raise ConfigError(path, f"invalid JSON: {err}")


def _jobs_cap(requested: int) -> int:
    cap = os.environ.get("DATAMARKET_THREADS")
    if cap is not None:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="datamarket", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "validate", "table", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a JSON config file")
        if name != "validate":
            p.add_argument("--out", default=None, help="output directory")
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
            p.add_argument("--profile", choices=("desk", "paper"), default=None)
            p.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.config)
        kind = validate_config(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(f"ok: valid {kind} config")
        return 0
    expected = {"run": "run", "table": "table", "sweep": "sweep"}[args.command]
    if kind != expected:
        print(f"config error: expected a {expected} config, got {kind}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.profile is not None:
        cfg["profile"] = args.profile
    out_dir = Path(args.out) if args.out else Path("runs") / Path(args.config).stem

    try:
        if args.command == "run":
            summary = run_config(cfg, out_dir)
            print(json.dumps(summary, indent=1, sort_keys=True))
        elif args.command == "sweep":
            points = cfg["alphas"] if cfg["sweep"] == "alpha" else cfg["grid"]
            rows = _parallel_map(_sweep_point, [(cfg, j) for j in range(len(points))], _jobs_cap(args.jobs))
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "sweep.csv").write_text(evaluation.sweep_to_csv(rows))
            print((out_dir / "sweep.csv").read_text())
        else:  # table
            rows = _parallel_map(_table_point, [(cfg, j) for j in range(len(cfg["cells"]))], _jobs_cap(args.jobs))
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "table.csv").write_text(evaluation.table_to_csv(rows))
            print((out_dir / "table.csv").read_text())
    except DivergenceError as err:
        print(f"runtime divergence: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
