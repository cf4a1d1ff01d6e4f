"""Replicated simulation and estimation over a (scheme, rho, T) grid.

Every replication draws its randomness from
``SeedSequence(master_seed, spawn_key=(scheme, rho, T, rep))``, so any
replication can be recomputed alone and growing the replication count
leaves earlier replications untouched.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .metrics import MetricReport, evaluate
from .model import ModelSpec
from .panel_io import format_number
from .simgen import SCHEMES, GridSpec, SchemeConfig, build_break_schedule, gen_scheme, simulate_panel
from .step2 import EstimateConfig, estimate

__all__ = [
    "Cell",
    "ExperimentConfig",
    "ReplicationResult",
    "AggregateTable",
    "replication_seed",
    "run_replication",
    "run_experiment",
    "parse_cell",
    "METRICS",
]

log = logging.getLogger(__name__)

METRICS = ("specificity", "sensitivity", "weight_bias", "mean_bias", "fitted_rmse")
METRIC_LABELS = {
    "specificity": "Pi_0",
    "sensitivity": "Pi_w",
    "weight_bias": "B_w",
    "mean_bias": "B_a",
    "fitted_rmse": "RMSE_y",
}
REPLICATION_FIELDS = ("scheme", "rho", "T", "rep", "master_seed", "status", *METRICS, "error")


class Cell(NamedTuple):
    scheme: str
    rho: float
    T: int

    def label(self) -> str:
        return f"{self.scheme}:{self.rho!r}:{self.T}"


def parse_cell(text: str) -> Cell:
    """``"queen:0.5:100"`` -> ``Cell("queen", 0.5, 100)``."""
    try:
        scheme, rho, T = text.split(":")
        cell = Cell(scheme, float(rho), int(T))
    except ValueError:
        raise ValueError(f"cell {text!r} is not of the form scheme:rho:T") from None
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r} in cell {text!r}")
    return cell


@dataclass(frozen=True)
class ExperimentConfig:
    schemes: tuple[str, ...] = SCHEMES
    rhos: tuple[float, ...] = (0.25, 0.5, 0.75)
    horizons: tuple[int, ...] = (100, 200)
    replications: int = 512
    master_seed: int = 0
    grid: GridSpec = GridSpec()
    group1_size: int = 10
    noise_sd: float = 1.0
    link_probability: float = 0.2
    n_blocks: int = 3
    block_side_range: tuple[int, int] = (1, 5)
    estimator: EstimateConfig = EstimateConfig()
    literal_pi0: bool = False
    cells: tuple[Cell, ...] | None = None

    def __post_init__(self):
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        for r in self.rhos:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"rho must lie in [0, 1), got {r}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if any(T < 8 for T in self.horizons):
            raise ValueError("horizons must be at least 8")
        if self.cells is not None:
            object.__setattr__(self, "cells", tuple(Cell(*c) for c in self.cells))
            for c in self.cells:
                if not 0.0 <= c.rho < 1.0:
                    raise ValueError(f"rho must lie in [0, 1), got {c.rho}")

    @property
    def n(self) -> int:
        return self.grid.n

    def all_cells(self) -> tuple[Cell, ...]:
        if self.cells is not None:
            return self.cells
        return tuple(Cell(s, r, T) for T in self.horizons for r in self.rhos for s in self.schemes)


@dataclass
class ReplicationResult:
    cell: Cell
    rep: int
    report: MetricReport | None
    error: str | None = None
    master_seed: int = 0

    @property
    def ok(self) -> bool:
        return self.report is not None

    def row(self) -> dict:
        out = {"scheme": self.cell.scheme, "rho": format_number(self.cell.rho), "T": str(self.cell.T),
               "rep": str(self.rep), "master_seed": str(self.master_seed),
               "status": "ok" if self.ok else "failed", "error": self.error or ""}
        for m in METRICS:
            out[m] = format_number(getattr(self.report, m)) if self.ok else "NA"
        return out

    @classmethod
    def from_row(cls, row: dict) -> "ReplicationResult":
        cell = Cell(row["scheme"], float(row["rho"]), int(row["T"]))
        report = None
        if row["status"] == "ok":
            report = MetricReport(**{m: float("nan") if row[m] == "NA" else float(row[m]) for m in METRICS})
        return cls(cell, int(row["rep"]), report, row["error"] or None, int(row["master_seed"]))


def replication_seed(master_seed: int, cell: Cell, rep: int) -> np.random.SeedSequence:
    # rho enters through its exact binary value; no rounding collisions
    rho_key = int(np.float64(cell.rho).view(np.uint64))
    key = (SCHEMES.index(cell.scheme), rho_key, int(cell.T), int(rep))
    return np.random.SeedSequence(master_seed, spawn_key=key)


def run_replication(cell: Cell, rep: int, cfg: ExperimentConfig) -> ReplicationResult:
    """Simulate one panel for ``cell`` and score the two-step estimate.

    Failures are captured in the result rather than raised.
    """
    cell = Cell(*cell)
    rng = np.random.default_rng(replication_seed(cfg.master_seed, cell, rep))
    try:
        scheme = SchemeConfig(cell.scheme, cfg.link_probability, cfg.n_blocks, cfg.block_side_range)
        w_tilde = gen_scheme(cfg.grid, scheme, rng)
        schedule = build_break_schedule(cfg.n, cell.T, cfg.group1_size)
        spec = ModelSpec(w_tilde.scaled(cell.rho), schedule, cfg.noise_sd)
        panel = simulate_panel(spec, rng)
        cv_seed = int(rng.integers(2**31 - 1))
        est_cfg = dataclasses.replace(cfg.estimator, seed=cv_seed,
                                      step1=dataclasses.replace(cfg.estimator.step1, seed=cv_seed))
        with warnings.catch_warnings():
            # an explosive w_hat only affects overall means, not the metrics
            warnings.simplefilter("ignore", RuntimeWarning)
            result = estimate(panel, est_cfg)
        report = evaluate(spec.weights, schedule.levels, panel, result, literal_pi0=cfg.literal_pi0)
        return ReplicationResult(cell, rep, report, None, cfg.master_seed)
    except Exception as exc:  # noqa: BLE001 - recorded as a failed replication
        log.debug("replication %s/%d failed:\n%s", cell.label(), rep, traceback.format_exc())
        return ReplicationResult(cell, rep, None, f"{type(exc).__name__}: {exc}", cfg.master_seed)


def _task(args):
    return run_replication(*args)


@dataclass
class AggregateTable:
    """One row per cell: success counts, metric means and standard deviations."""

    rows: list[dict] = field(default_factory=list)
    results: list[ReplicationResult] = field(default_factory=list, repr=False)

    @classmethod
    def from_results(cls, cells, results) -> "AggregateTable":
        rows = []
        for cell in cells:
            mine = [r for r in results if r.cell == cell]
            ok = [r.report for r in mine if r.ok]
            row = {"scheme": cell.scheme, "rho": cell.rho, "T": cell.T,
                   "n_ok": len(ok), "n_failed": len(mine) - len(ok)}
            for m in METRICS:
                v = np.array([getattr(rep, m) for rep in ok], dtype=float)
                v = v[~np.isnan(v)]
                row[m] = float(v.mean()) if v.size else math.nan
                row[m + "_sd"] = float(v.std(ddof=1)) if v.size > 1 else math.nan
            rows.append(row)
        return cls(rows, list(results))

    @property
    def success_rate(self) -> float:
        ok = sum(r["n_ok"] for r in self.rows)
        total = ok + sum(r["n_failed"] for r in self.rows)
        return ok / total if total else math.nan

    def row(self, scheme: str, rho: float, T: int) -> dict:
        for r in self.rows:
            if (r["scheme"], r["rho"], r["T"]) == (scheme, rho, T):
                return r
        raise KeyError((scheme, rho, T))

    def to_csv(self) -> str:
        cols = ["scheme", "rho", "T", "n_ok", "n_failed"]
        for m in METRICS:
            cols += [m, m + "_sd"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["scheme"], format_number(r["rho"]), r["T"], r["n_ok"], r["n_failed"]]
                       + [format_number(r[c]) for c in cols[5:]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        """Metric rows grouped by rho, one column per (T, scheme); means to 3 decimals."""
        horizons = sorted({r["T"] for r in self.rows})
        schemes = [s for s in SCHEMES if any(r["scheme"] == s for r in self.rows)]
        rhos = sorted({r["rho"] for r in self.rows})
        cols = [(T, s) for T in horizons for s in schemes]
        lines = ["| rho | metric | " + " | ".join(f"T={T} {s}" for T, s in cols) + " |",
                 "|---|---|" + "---|" * len(cols)]
        for rho in rhos:
            for k, m in enumerate(METRICS):
                cells = []
                for T, s in cols:
                    try:
                        v = self.row(s, rho, T)[m]
                    except KeyError:
                        cells.append("")
                        continue
                    cells.append("NA" if math.isnan(v) else f"{v:.3f}")
                lab = f"{rho:g}" if k == 0 else ""
                lines.append(f"| {lab} | {METRIC_LABELS[m]} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _read_replications(path: Path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for row in rows:
        r = ReplicationResult.from_row(row)
        out[(r.cell, r.rep)] = r
    return out


def _write_replications(path: Path, results) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, REPLICATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, outdir=None, resume: bool = False,
                   progress=None) -> AggregateTable:
    """Run every cell of ``cfg`` for ``cfg.replications`` replications.

    With ``outdir``, writes ``replications.csv``, ``table.csv`` and
    ``table.md``. ``resume=True`` reuses successful replications already in
    ``replications.csv`` (same master seed) and only computes the rest.
    ``progress(done, total)`` is called as results arrive.
    """
    cells = cfg.all_cells()
    tasks = [(c, rep) for c in cells for rep in range(cfg.replications)]
    done: dict = {}
    out = Path(outdir) if outdir is not None else None
    if resume and out is not None and (out / "replications.csv").exists():
        prev = _read_replications(out / "replications.csv")
        done = {k: v for k, v in prev.items() if v.ok and v.master_seed == cfg.master_seed}
    todo = [t for t in tasks if t not in done]
    log.info("%d replications to run (%d reused)", len(todo), len(tasks) - len(todo))
    results = dict(done)
    args = [(c, rep, cfg) for c, rep in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for k, res in enumerate(pool.map(_task, args, chunksize=1), start=1):
                results[(res.cell, res.rep)] = res
                if progress:
                    progress(k, len(args))
    else:
        for k, a in enumerate(args, start=1):
            res = _task(a)
            results[(res.cell, res.rep)] = res
            if progress:
                progress(k, len(args))
    ordered = [results[t] for t in tasks]
    table = AggregateTable.from_results(cells, ordered)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_replications(out / "replications.csv", ordered)
        (out / "table.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "table.md").write_text(table.to_markdown(), encoding="utf-8")
    return table
