"""Command-line interface: ``simulate``, ``estimate``, ``mc`` and ``transform``.

Parameters come from built-in defaults, then an optional JSON file of flat
dotted keys (``--config``), then command-line flags. The merged result is
written to ``config_resolved.json`` in the output directory.

Exit codes: 0 success, 1 computational failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelSpec
from .montecarlo import ExperimentConfig, parse_cell, run_experiment
from .panel_io import (
    PanelParseError,
    RawPanel,
    TransformState,
    normal_to_original,
    pit_to_normal,
    read_panel_csv,
    screen_locations,
    write_matrix_csv,
)
from .simgen import SCHEMES, GridSpec, SchemeConfig, build_break_schedule, gen_scheme, simulate_panel
from .step1 import DetectConfig
from .step2 import EstimateConfig, estimate

CONFIG_SCHEMA_VERSION = 1

log = logging.getLogger("spatbreak")


class UsageError(Exception):
    """Invalid configuration or input; maps to exit code 2."""


_GRID = {"grid.rows": 5, "grid.cols": 5}
_DGP = {
    "group1_size": 10,
    "noise_sd": 1.0,
    "link_probability": 0.2,
    "n_blocks": 3,
    "block_side_min": 1,
    "block_side_max": 5,
}
_EST = {
    "tail_freeze_fraction": 0.0,
    "step1.gamma": 1.0,
    "step1.folds": 10,
    "step1.seed": 0,
    "step1.relax": False,
    "step2.gamma": 1.0,
    "step2.folds": 10,
    "step2.seed": 0,
    "step2.pre_estimator": "ridge",
    "step2.ridge_scale": 0.05,
    "solver.tol": 1e-7,
}

DEFAULTS = {
    "simulate": {"scheme": "queen", "rho": 0.5, "T": 100, **_GRID, **_DGP, "seed": 0, "out": "simulation"},
    "estimate": {"input": None, "out": "estimate", **_EST},
    "mc": {
        "schemes": list(SCHEMES),
        "rhos": [0.25, 0.5, 0.75],
        "horizons": [100, 200],
        "replications": 512,
        "master_seed": 0,
        "cells": [],
        "jobs": 1,
        "literal_pi0": False,
        **_GRID,
        **_DGP,
        **{k: v for k, v in _EST.items() if k != "tail_freeze_fraction"},
        "out": "mc",
    },
    "transform": {
        "direction": "to-normal",
        "input": None,
        "state": None,
        "max_missing_fraction": 0.5,
        "out": "transform",
    },
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flat dotted keys")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", dest="_verbose")


def _est_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int, dest="step1.folds", help="CV folds (both steps)")
    p.add_argument("--gamma", type=float, dest="step1.gamma", help="adaptive-weight exponent (both steps)")
    p.add_argument("--pre-estimator", choices=["ridge", "ols", "auto"], dest="step2.pre_estimator")
    p.add_argument("--ridge-scale", type=float, dest="step2.ridge_scale")
    p.add_argument("--tol", type=float, dest="solver.tol")


def _dgp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-rows", type=int, dest="grid.rows")
    p.add_argument("--grid-cols", type=int, dest="grid.cols")
    p.add_argument("--group1-size", type=int, dest="group1_size")
    p.add_argument("--noise-sd", type=float, dest="noise_sd")
    p.add_argument("--link-probability", type=float, dest="link_probability")
    p.add_argument("--n-blocks", type=int, dest="n_blocks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatbreak", argument_default=argparse.SUPPRESS,
                                     description="Spatial weights and mean-level breaks by adaptive lasso.")
    parser.add_argument("--version", action="version",
                        version=f"spatbreak {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="simulate a panel from the two-group break design")
    _common(p)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--rho", type=float)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--seed", type=int)
    _dgp_flags(p)

    p = sub.add_parser("estimate", argument_default=argparse.SUPPRESS,
                       help="two-step estimation on a panel CSV")
    _common(p)
    p.add_argument("--input", help="panel CSV (time rows, location columns)")
    p.add_argument("--tail-freeze", type=float, dest="tail_freeze_fraction")
    p.add_argument("--seed", type=int, dest="_seed", help="CV seed (both steps)")
    _est_flags(p)

    p = sub.add_parser("mc", argument_default=argparse.SUPPRESS, help="Monte Carlo experiment")
    _common(p)
    p.add_argument("--schemes", type=lambda s: s.split(","))
    p.add_argument("--rhos", type=lambda s: [float(x) for x in s.split(",")])
    p.add_argument("--horizons", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--reps", type=int, dest="replications")
    p.add_argument("--seed", type=int, dest="master_seed")
    p.add_argument("--cells", action="append", help="scheme:rho:T, repeatable or comma-separated")
    p.add_argument("--jobs", type=int)
    p.add_argument("--resume", action="store_true", dest="_resume")
    p.add_argument("--literal-pi0", action="store_true", dest="literal_pi0")
    _dgp_flags(p)
    _est_flags(p)

    p = sub.add_parser("transform", argument_default=argparse.SUPPRESS,
                       help="normal-score transform of a panel and its inverse")
    _common(p)
    p.add_argument("--direction", choices=["to-normal", "to-original"])
    p.add_argument("--input")
    p.add_argument("--state", help="transform state JSON (written by to-normal, read by to-original)")
    p.add_argument("--max-missing", type=float, dest="max_missing_fraction")
    return parser


def resolve_config(command: str, args: dict) -> dict:
    """Defaults, then the ``--config`` file, then flags."""
    cfg = dict(DEFAULTS[command])
    path = args.pop("config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object of dotted keys")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(doc)
    seed = args.pop("_seed", None)
    if seed is not None:
        args["step1.seed"] = args["step2.seed"] = seed
    # the shared estimator flags set both steps
    for k in ("folds", "gamma"):
        if f"step1.{k}" in args and command in ("estimate", "mc"):
            args[f"step2.{k}"] = args[f"step1.{k}"]
    if command == "mc" and "cells" in args:
        args["cells"] = [c for arg in args["cells"] for c in arg.split(",") if c]
    cfg.update({k: v for k, v in args.items() if not k.startswith("_")})
    return cfg


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise UsageError(f"{key}: {msg}")


def _estimate_config(cfg: dict) -> EstimateConfig:
    for s in ("step1", "step2"):
        _require(cfg[f"{s}.folds"] >= 2, f"{s}.folds", "must be at least 2")
        _require(cfg[f"{s}.gamma"] > 0, f"{s}.gamma", "must be positive")
    _require(cfg["step2.pre_estimator"] in ("ridge", "ols", "auto"), "step2.pre_estimator",
             "must be ridge, ols or auto")
    _require(cfg["step2.ridge_scale"] > 0, "step2.ridge_scale", "must be positive")
    _require(cfg["solver.tol"] > 0, "solver.tol", "must be positive")
    tail = cfg.get("tail_freeze_fraction", 0.0)
    _require(0.0 <= tail < 1.0, "tail_freeze_fraction", "must lie in [0, 1)")
    step1 = DetectConfig(gamma=float(cfg["step1.gamma"]), folds=int(cfg["step1.folds"]),
                         seed=int(cfg["step1.seed"]), relax=bool(cfg["step1.relax"]),
                         tol=float(cfg["solver.tol"]))
    return EstimateConfig(step1=step1, gamma=float(cfg["step2.gamma"]), folds=int(cfg["step2.folds"]),
                          seed=int(cfg["step2.seed"]), tail_freeze_fraction=float(tail),
                          pre_estimator=cfg["step2.pre_estimator"],
                          ridge_scale=float(cfg["step2.ridge_scale"]), tol=float(cfg["solver.tol"]))


def _grid(cfg: dict) -> GridSpec:
    _require(cfg["grid.rows"] >= 1 and cfg["grid.cols"] >= 1, "grid", "dimensions must be positive")
    return GridSpec(int(cfg["grid.rows"]), int(cfg["grid.cols"]))


def _scheme_kw(cfg: dict) -> dict:
    _require(0.0 <= cfg["link_probability"] <= 1.0, "link_probability", "must lie in [0, 1]")
    _require(cfg["n_blocks"] >= 1, "n_blocks", "must be positive")
    _require(1 <= cfg["block_side_min"] <= cfg["block_side_max"], "block_side_min",
             "need 1 <= block_side_min <= block_side_max")
    _require(cfg["noise_sd"] >= 0, "noise_sd", "must be nonnegative")
    return dict(link_probability=float(cfg["link_probability"]), n_blocks=int(cfg["n_blocks"]),
                block_side_range=(int(cfg["block_side_min"]), int(cfg["block_side_max"])))


def _write_config(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, "version": __version__, "config_schema": CONFIG_SCHEMA_VERSION, **cfg}
    (out / "config_resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def cmd_simulate(cfg: dict) -> int:
    _require(cfg["scheme"] in SCHEMES, "scheme", f"must be one of {', '.join(SCHEMES)}")
    _require(0.0 <= cfg["rho"] < 1.0, "rho", "must satisfy 0 <= rho < 1 for a stationary process")
    _require(cfg["T"] >= 8, "T", "must be at least 8")
    grid = _grid(cfg)
    _require(0 < cfg["group1_size"] < grid.n, "group1_size", f"must lie in 1..{grid.n - 1}")
    kw = _scheme_kw(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    try:
        w_tilde = gen_scheme(grid, SchemeConfig(cfg["scheme"], **kw), rng)
    except ValueError as exc:
        raise UsageError(f"scheme: {exc}") from None
    schedule = build_break_schedule(grid.n, int(cfg["T"]), int(cfg["group1_size"]))
    spec = ModelSpec(w_tilde.scaled(float(cfg["rho"])), schedule, float(cfg["noise_sd"]))
    panel = simulate_panel(spec, rng)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    times = [str(t + 1) for t in range(panel.T)]
    locs = [str(i) for i in range(panel.n)]
    write_matrix_csv(out / "panel.csv", panel.values, times, locs)
    write_matrix_csv(out / "w_true.csv", spec.weights.weights, locs, locs, corner="location")
    write_matrix_csv(out / "schedule.csv", schedule.levels, times, locs)
    _write_config(out, "simulate", cfg)
    log.info("wrote %d x %d panel to %s", panel.T, panel.n, out)
    return 0


def _read_input(path) -> RawPanel:
    if path is None:
        raise UsageError("input: a panel CSV is required (--input)")
    if not Path(path).is_file():
        raise UsageError(f"input: file not found: {path}")
    try:
        return read_panel_csv(path)
    except PanelParseError as exc:
        raise UsageError(f"input: {exc}") from None


def cmd_estimate(cfg: dict) -> int:
    est_cfg = _estimate_config(cfg)
    raw = _read_input(cfg["input"])
    if raw.missing.any():
        raise UsageError("input: panel has missing cells; run `transform` (which screens and imputes) first")
    _require(raw.shape[0] >= 8, "input", "need at least 8 time points")
    panel = raw.to_observations()
    result = estimate(panel, est_cfg, labels=raw.location_labels)
    out = Path(cfg["out"])
    result.save(out, raw.location_labels, raw.time_labels)
    (out / "candidates.json").write_text(result.candidates.to_json() + "\n", encoding="utf-8")
    _write_config(out, "estimate", cfg)
    log.info("spectral radius of w_hat: %.4f", result.diagnostics["spectral_radius_w_hat"])
    return 0


def cmd_mc(cfg: dict, resume: bool = False) -> int:
    est_cfg = _estimate_config(cfg)
    _require(cfg["replications"] >= 1, "replications", "must be at least 1")
    _require(cfg["jobs"] >= 1, "jobs", "must be at least 1")
    try:
        cells = tuple(parse_cell(c) for c in cfg["cells"]) or None
        exp = ExperimentConfig(
            schemes=tuple(cfg["schemes"]), rhos=tuple(float(r) for r in cfg["rhos"]),
            horizons=tuple(int(t) for t in cfg["horizons"]), replications=int(cfg["replications"]),
            master_seed=int(cfg["master_seed"]), grid=_grid(cfg), group1_size=int(cfg["group1_size"]),
            noise_sd=float(cfg["noise_sd"]), estimator=est_cfg, literal_pi0=bool(cfg["literal_pi0"]),
            cells=cells, **_scheme_kw(cfg),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])

    def progress(done, total):
        if done == total or done % 10 == 0:
            log.info("%d/%d replications", done, total)

    table = run_experiment(exp, jobs=int(cfg["jobs"]), outdir=out, resume=resume, progress=progress)
    _write_config(out, "mc", cfg)
    failed = sum(r["n_failed"] for r in table.rows)
    if failed:
        print(f"{failed} replication(s) failed; success rate {table.success_rate:.3f}", file=sys.stderr)
    return 0 if table.success_rate >= 0.95 else 1


def cmd_transform(cfg: dict) -> int:
    _require(cfg["direction"] in ("to-normal", "to-original"), "direction", "must be to-normal or to-original")
    _require(0.0 <= cfg["max_missing_fraction"] <= 1.0, "max_missing_fraction", "must lie in [0, 1]")
    out = Path(cfg["out"])
    if cfg["direction"] == "to-normal":
        raw = _read_input(cfg["input"])
        try:
            screened = screen_locations(raw, float(cfg["max_missing_fraction"]))
            scores, state = pit_to_normal(screened)
        except ValueError as exc:
            raise UsageError(f"input: {exc}") from None
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(out / "transformed.csv", scores.values, screened.time_labels,
                         screened.location_labels)
        state.save(cfg["state"] or out / "transform_state.json")
        if screened.dropped:
            print(f"dropped locations: {', '.join(screened.dropped)}", file=sys.stderr)
    else:
        _require(cfg["state"] is not None, "state", "required for to-original")
        _require(Path(cfg["state"]).is_file(), "state", f"file not found: {cfg['state']}")
        raw = _read_input(cfg["input"])
        state = TransformState.load(cfg["state"])
        index = {lab: k for k, lab in enumerate(state.location_labels)}
        missing = [lab for lab in raw.location_labels if lab not in index]
        _require(not missing, "input", f"locations not in the state file: {', '.join(missing)}")
        sub = TransformState(raw.location_labels,
                             tuple(state.values[index[lab]] for lab in raw.location_labels),
                             tuple(state.scores[index[lab]] for lab in raw.location_labels), state.T)
        if raw.missing.any():
            raise UsageError("input: score file has missing cells")
        values = normal_to_original(raw.values, sub)
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(out / "transformed.csv", values, raw.time_labels, raw.location_labels)
    _write_config(out, "transform", cfg)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args = vars(ns)
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("_verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    resume = bool(args.pop("_resume", False))
    try:
        cfg = resolve_config(command, args)
        if command == "simulate":
            return cmd_simulate(cfg)
        if command == "estimate":
            return cmd_estimate(cfg)
        if command == "mc":
            return cmd_mc(cfg, resume=resume)
        return cmd_transform(cfg)
    except UsageError as exc:
        print(f"spatbreak {command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - computational failure
        log.debug("failure", exc_info=True)
        print(f"spatbreak {command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
