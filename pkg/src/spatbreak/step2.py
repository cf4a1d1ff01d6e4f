"""Joint estimation of the break magnitudes and the full spatial weights matrix.

With the panel stacked location by location, ``y = Psi b + Z xi + e``:
``Psi`` holds, per location, the baseline column and one step column per
step-1 candidate; ``Z = I_n (x) Y`` with each location's own column removed.
One adaptive lasso over both blocks, weights boxed into ``[0, 1]``.

The regressors in ``Z`` are contemporaneous observations, so the fit
inherits the simultaneity of the autoregressive model; no correction is
attempted.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .model import (
    ConvergenceError,
    PanelObservations,
    SpatialWeightMatrix,
    StationarityError,
    reduced_form,
    spectral_radius,
)
from .penalized import (
    PenalizedProblem,
    cross_validate,
    lasso_cd,
)
from .step1 import CandidateSets, DetectConfig, adaptive_weights, run_all_locations

__all__ = [
    "JointDesign",
    "EstimateConfig",
    "EstimationResult",
    "build_joint_design",
    "fit_joint",
    "estimate",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointDesign:
    """Stacked regression for the joint fit.

    ``column_map[k]`` is ``("break", i, t)`` (step column of location ``i``
    switching on at 1-based time ``t``; ``t == 1`` is the baseline) or
    ``("weight", i, j)`` (coefficient ``w_ij``, regressor ``y_j`` in the rows
    of location ``i``). Break columns come first.
    """

    T: int
    n: int
    response: NDArray[np.float64]
    break_block: NDArray[np.float64]
    weight_block: NDArray[np.float64]
    column_map: tuple[tuple[str, int, int], ...]
    candidates: CandidateSets

    @property
    def matrix(self) -> NDArray[np.float64]:
        return np.hstack([self.break_block, self.weight_block])

    @property
    def n_break(self) -> int:
        return self.break_block.shape[1]

    @property
    def column_location(self) -> NDArray[np.int64]:
        return np.array([c[1] for c in self.column_map], dtype=np.int64)

    @property
    def row_location(self) -> NDArray[np.int64]:
        return np.repeat(np.arange(self.n), self.T)


def build_joint_design(panel: PanelObservations, candidates: CandidateSets) -> JointDesign:
    T, n = panel.T, panel.n
    if candidates.n != n or candidates.T != T:
        raise ValueError(f"candidates are for a {candidates.T} x {candidates.n} panel, "
                         f"panel is {T} x {n}")
    y = panel.values
    cmap: list[tuple[str, int, int]] = []
    bcols = []
    for i, cands in enumerate(candidates.sets):
        onsets = sorted(set(cands))
        if onsets and (onsets[0] < 2 or onsets[-1] > T):
            raise ValueError(f"candidate onsets at location {i} must lie in 2..{T}")
        for t in [1, *onsets]:
            col = np.zeros(n * T)
            col[i * T + t - 1:(i + 1) * T] = 1.0
            bcols.append(col)
            cmap.append(("break", i, t))
    wblock = np.zeros((n * T, n * (n - 1)))
    k = 0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            wblock[i * T:(i + 1) * T, k] = y[:, j]
            cmap.append(("weight", i, j))
            k += 1
    bblock = np.column_stack(bcols) if bcols else np.zeros((n * T, 0))
    return JointDesign(T, n, y.T.ravel().copy(), bblock, wblock, tuple(cmap), candidates)


@dataclass(frozen=True)
class EstimateConfig:
    """Settings for the two-step estimator.

    ``pre_estimator`` is ``"ridge"`` (default), ``"ols"`` or ``"auto"``
    (least squares when the parameter count is at most ``ols_max_ratio * nT``
    and the Gram condition number is below ``ols_max_cond``, ridge
    otherwise). With least-squares pre-estimates the selected weights are
    noticeably sparser. ``refit_weights_in_cv=False`` keeps the full-sample
    penalty weights in every fold; ``standardize=True`` penalizes
    coefficients on the standard-deviation scale of their columns. A
    fixed ``lam`` skips cross-validation.
    """

    step1: DetectConfig = DetectConfig()
    gamma: float = 1.0
    folds: int = 10
    seed: int = 0
    tail_freeze_fraction: float = 0.0
    pre_estimator: str = "ridge"
    ols_max_ratio: float = 0.8
    ols_max_cond: float = 1e10
    ridge_scale: float = 0.05
    refit_weights_in_cv: bool = True
    standardize: bool = False
    lam: float | None = None
    tol: float = 1e-7


@dataclass
class EstimationResult:
    w_hat: SpatialWeightMatrix
    b_hat: dict[tuple[int, int], float]
    a_hat: NDArray[np.float64]
    overall_mean: NDArray[np.float64] | None
    fitted: NDArray[np.float64]
    selected_lambda: float
    candidates: CandidateSets
    diagnostics: dict = field(default_factory=dict)

    def selected_breaks(self, i: int) -> tuple[int, ...]:
        """Onsets (1-based, ``t >= 2``) with a nonzero estimated jump at location ``i``."""
        return tuple(sorted(t for (loc, t), v in self.b_hat.items() if loc == i and t >= 2 and v != 0))

    def save(self, outdir, location_labels=None, time_labels=None):
        """Write ``w_hat.csv``, ``breaks.json``, ``means.csv``, ``overall_means.csv``,
        ``diagnostics.json``."""
        from .panel_io import write_matrix_csv

        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        n = self.w_hat.n
        locs = list(location_labels) if location_labels is not None else [str(i) for i in range(n)]
        times = list(time_labels) if time_labels is not None else [str(t + 1) for t in range(self.a_hat.shape[0])]
        write_matrix_csv(out / "w_hat.csv", self.w_hat.weights, locs, locs, corner="location")
        write_matrix_csv(out / "means.csv", self.a_hat, times, locs)
        if self.overall_mean is not None:
            write_matrix_csv(out / "overall_means.csv", self.overall_mean, times, locs)
        breaks = {
            locs[i]: [{"t": t, "magnitude": v} for (loc, t), v in sorted(self.b_hat.items())
                      if loc == i and v != 0]
            for i in range(n)
        }
        (out / "breaks.json").write_text(json.dumps(breaks, indent=2) + "\n", encoding="utf-8")
        (out / "diagnostics.json").write_text(json.dumps(self.diagnostics, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


class _PreEstimator:
    """Block-wise OLS or ridge pre-fit.

    The ridge penalty on coefficient ``j`` is ``ridge_scale * ||x_j||^2``,
    i.e. a plain ridge on unit-norm columns, so step columns and lagged
    observations are shrunk on a common scale.

    Rows and columns of the joint design split into independent per-location
    blocks, so both fits are computed one location at a time.
    """

    def __init__(self, design: JointDesign, cfg: EstimateConfig):
        self.x = design.matrix
        self.y = design.response
        self.cols = [np.flatnonzero(design.column_location == i) for i in range(design.n)]
        self.rows = design.row_location
        self.n = design.n
        p, m = self.x.shape[1], self.x.shape[0]
        self.ridge_scale = cfg.ridge_scale
        self.cond = self._condition()
        if cfg.pre_estimator == "auto":
            self.kind = "ols" if (p <= cfg.ols_max_ratio * m and self.cond < cfg.ols_max_cond) else "ridge"
        elif cfg.pre_estimator in ("ols", "ridge"):
            self.kind = cfg.pre_estimator
        else:
            raise ValueError(f"unknown pre_estimator {cfg.pre_estimator!r}")
        if cfg.ridge_scale <= 0:
            raise ValueError("ridge_scale must be positive")

    def _blocks(self, mask):
        for i in range(self.n):
            r = (self.rows == i) & mask
            c = self.cols[i]
            yield c, self.x[np.ix_(r, c)], self.y[r]

    def _condition(self) -> float:
        lo, hi = np.inf, 0.0
        for _, xb, _ in self._blocks(np.ones(self.x.shape[0], dtype=bool)):
            if xb.shape[1] == 0:
                continue
            ev = np.linalg.eigvalsh(xb.T @ xb)
            lo, hi = min(lo, ev[0]), max(hi, ev[-1])
        return float(hi / lo) if lo > 0 else np.inf

    def __call__(self, mask) -> NDArray[np.float64]:
        beta = np.zeros(self.x.shape[1])
        for c, xb, yb in self._blocks(mask):
            if c.size == 0:
                continue
            if self.kind == "ols":
                beta[c] = np.linalg.lstsq(xb, yb, rcond=None)[0]
            else:
                a = xb.T @ xb
                a[np.diag_indices_from(a)] *= 1.0 + self.ridge_scale
                beta[c] = np.linalg.solve(a, xb.T @ yb)
        return beta


def _spectral_radius(w) -> float:
    try:
        return spectral_radius(w)
    except ConvergenceError:
        return float(np.max(np.abs(np.linalg.eigvals(w))))


def fit_joint(design: JointDesign, cfg: EstimateConfig = EstimateConfig()) -> EstimationResult:
    """Adaptive lasso on the stacked regression, lambda by CV with the 1-SE rule."""
    T, n = design.T, design.n
    x, y = design.matrix, design.response
    pre = _PreEstimator(design, cfg)
    all_rows = np.ones(x.shape[0], dtype=bool)
    sd = x.std(axis=0) if cfg.standardize else np.ones(x.shape[1])

    def weights(rows):
        return adaptive_weights(pre(rows), cfg.gamma) * sd

    w = weights(all_rows)
    nb = design.n_break
    lo = np.concatenate([np.full(nb, -np.inf), np.zeros(x.shape[1] - nb)])
    hi = np.concatenate([np.full(nb, np.inf), np.ones(x.shape[1] - nb)])
    problem = PenalizedProblem(x, y, penalty_weights=w, lower_bounds=lo, upper_bounds=hi)
    if cfg.lam is None:
        cv = cross_validate(problem, k=cfg.folds, seed=cfg.seed,
                            weight_fn=weights if cfg.refit_weights_in_cv else None, tol=cfg.tol)
        lam, lam_min = cv.lambda_1se, cv.lambda_min
    else:
        lam = lam_min = float(cfg.lam)
    fit = lasso_cd(problem, lam, tol=cfg.tol)
    coef = fit.coefficients

    w_hat = np.zeros((n, n))
    jumps = np.zeros((T, n))
    b_hat: dict[tuple[int, int], float] = {}
    for k, (kind, i, j) in enumerate(design.column_map):
        if kind == "weight":
            w_hat[i, j] = coef[k]
        else:
            b_hat[(i, j)] = float(coef[k])
            jumps[j - 1, i] += coef[k]
    a_hat = np.cumsum(jumps, axis=0)
    fitted = (x @ coef).reshape(n, T).T
    w_mat = SpatialWeightMatrix(w_hat)
    rho = _spectral_radius(w_hat)
    overall = None
    if rho < 1.0:
        try:
            overall = a_hat @ reduced_form(w_hat).T
        except StationarityError:
            overall = None
    if overall is None:
        warnings.warn(f"estimated W has spectral radius {rho:.4g} >= 1 (or I - W is singular); "
                      "overall mean levels are not defined", RuntimeWarning, stacklevel=2)
    n_sel = sum(1 for (i, t), v in b_hat.items() if t >= 2 and v != 0)
    resid = design.response - x @ coef
    diagnostics = {
        "spectral_radius_w_hat": rho,
        "well_defined": overall is not None,
        "selected_lambda": lam,
        "lambda_min": lam_min,
        "pre_estimator": pre.kind,
        "pre_condition_number": pre.cond if math.isfinite(pre.cond) else None,
        "n_parameters": int(x.shape[1]),
        "n_observations": int(x.shape[0]),
        "candidate_breaks": design.candidates.total,
        "selected_breaks": n_sel,
        "nonzero_weights": int(np.count_nonzero(w_hat)),
        "fitted_rmse": float(math.sqrt(resid @ resid / resid.size)),
        "cd_sweeps": fit.iterations,
        "objective": fit.objective,
    }
    return EstimationResult(w_mat, b_hat, a_hat, overall, fitted, lam,
                            design.candidates, diagnostics)


def estimate(panel: PanelObservations, cfg: EstimateConfig = EstimateConfig(),
             labels=None) -> EstimationResult:
    """Two-step estimator: candidates per location, then the joint fit."""
    cands = run_all_locations(panel, cfg.step1, labels=labels)
    if cfg.tail_freeze_fraction > 0:
        cands = cands.truncate_tail(cfg.tail_freeze_fraction)
    result = fit_joint(build_joint_design(panel, cands), cfg)
    result.diagnostics.update({f"step1_{k}": v for k, v in cands.diagnostics().items()})
    result.diagnostics["tail_freeze_fraction"] = cfg.tail_freeze_fraction
    return result
