"""Candidate change points, one location at a time.

Each series is regressed on the lower-triangular step design ``K`` (column
``t`` switches on at time ``t``), with adaptive-lasso weights from a ridge
pre-fit and lambda picked by cross-validation with the one-standard-error
rule. Nonzero coefficients at ``t >= 2`` are level changes taking effect at
time ``t``; the first coefficient is the baseline level.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import PanelObservations
from .penalized import (
    CvResult,
    PenalizedProblem,
    cross_validate,
    default_ridge_lambda,
    lasso_cd,
    ridge_fit,
)

__all__ = [
    "StepDesign",
    "DetectConfig",
    "Step1Fit",
    "CandidateSets",
    "build_step_design",
    "adaptive_weights",
    "fit_step1",
    "detect_candidates",
    "run_all_locations",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepDesign:
    """Implicit ``T x T`` matrix ``K[t, j] = 1 if j <= t``."""

    T: int

    def matvec(self, beta: ArrayLike) -> NDArray[np.float64]:
        return np.cumsum(np.asarray(beta, dtype=float))

    def rmatvec(self, r: ArrayLike) -> NDArray[np.float64]:
        return np.cumsum(np.asarray(r, dtype=float)[::-1])[::-1]

    def dense(self) -> NDArray[np.float64]:
        return np.tril(np.ones((self.T, self.T)))


def build_step_design(T: int) -> StepDesign:
    if T < 2:
        raise ValueError("step design needs T >= 2")
    return StepDesign(int(T))


@dataclass(frozen=True)
class DetectConfig:
    """Settings for candidate detection.

    ``relax=True`` returns the union of the supports at ``lambda_1se`` and
    ``lambda_min``. ``ridge_lambda=None`` uses ``default_ridge_lambda``.
    """

    gamma: float = 1.0
    folds: int = 10
    seed: int = 0
    ridge_lambda: float | None = None
    relax: bool = False
    refit_weights_in_cv: bool = True
    tol: float = 1e-7


@dataclass
class Step1Fit:
    candidates: tuple[int, ...]
    coefficients: NDArray[np.float64]
    penalty_weights: NDArray[np.float64]
    lam: float
    cv: CvResult | None = field(default=None, repr=False)


def adaptive_weights(pre_estimate: ArrayLike, gamma: float = 1.0) -> NDArray[np.float64]:
    """``1 / |b|^gamma``; exact zeros get an infinite weight."""
    b = np.abs(np.asarray(pre_estimate, dtype=float))
    out = np.full(b.shape, np.inf)
    np.power(b, -gamma, out=out, where=b > 0)
    return out


def _support(beta) -> tuple[int, ...]:
    # 1-based onsets, baseline (index 0) excluded
    return tuple(int(t) + 1 for t in np.flatnonzero(beta) if t >= 1)


def fit_step1(series: ArrayLike, cfg: DetectConfig = DetectConfig()) -> Step1Fit:
    y = np.asarray(series, dtype=float).ravel()
    T = y.size
    if T < 8:
        raise ValueError("series needs at least 8 time points")
    if not np.all(np.isfinite(y)):
        raise ValueError("series must be finite")
    K = build_step_design(T).dense()

    def weights(x, r):
        lam_r = cfg.ridge_lambda if cfg.ridge_lambda is not None else default_ridge_lambda(x)
        return adaptive_weights(ridge_fit(x, r, lam_r), cfg.gamma)

    w = weights(K, y)
    if not np.any(np.isfinite(w)):
        return Step1Fit((), np.zeros(T), w, np.inf)
    problem = PenalizedProblem(K, y, penalty_weights=w)
    try:
        cv = cross_validate(problem, k=cfg.folds, seed=cfg.seed,
                            weight_fn=(lambda rows: weights(K[rows], y[rows])) if cfg.refit_weights_in_cv else None,
                            tol=cfg.tol)
    except ValueError as exc:
        if "lambda_max is zero" in str(exc):
            return Step1Fit((), np.zeros(T), w, np.inf)
        raise
    fit = lasso_cd(problem, cv.lambda_1se, tol=cfg.tol)
    cands = _support(fit.coefficients)
    if cfg.relax:
        extra = lasso_cd(problem, cv.lambda_min, tol=cfg.tol)
        cands = tuple(sorted(set(cands) | set(_support(extra.coefficients))))
    return Step1Fit(cands, fit.coefficients, w, cv.lambda_1se, cv)


def detect_candidates(series: ArrayLike, cfg: DetectConfig = DetectConfig()) -> tuple[int, ...]:
    """Sorted 1-based onsets ``t`` (``2 <= t <= T``) of candidate level changes."""
    return fit_step1(series, cfg).candidates


@dataclass
class CandidateSets:
    """Per-location candidate onsets plus reduction diagnostics."""

    T: int
    sets: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...] | None = None
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.sets)

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.sets)

    def diagnostics(self) -> dict:
        return {
            "total_candidates": self.total,
            "below_T": self.total < self.T,
            "below_nT": self.total < self.n * self.T,
            "failed_locations": sorted(self.errors),
        }

    def truncate_tail(self, fraction: float) -> "CandidateSets":
        """Drop onsets inside the final ``fraction`` of the sample."""
        if not 0.0 <= fraction < 1.0:
            raise ValueError("tail fraction must lie in [0, 1)")
        last = self.T - int(np.floor(fraction * self.T + 1e-9))
        sets = tuple(tuple(t for t in s if t <= last) for s in self.sets)
        return CandidateSets(self.T, sets, self.labels, dict(self.errors))

    def _keys(self):
        return self.labels if self.labels is not None else tuple(str(i) for i in range(self.n))

    def to_json(self) -> str:
        doc = {"T": self.T, "candidates": {k: list(s) for k, s in zip(self._keys(), self.sets)}}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CandidateSets":
        doc = json.loads(text)
        keys = tuple(doc["candidates"])
        sets = tuple(tuple(sorted(int(t) for t in doc["candidates"][k])) for k in keys)
        return cls(int(doc["T"]), sets, keys)


def run_all_locations(panel: PanelObservations, cfg: DetectConfig = DetectConfig(),
                      labels=None, n_jobs: int = 1) -> CandidateSets:
    """Candidate detection independently for every column of ``panel``.

    Failures at single locations are recorded (empty set, message in
    ``errors``); a ``RuntimeError`` is raised only if every location fails.
    """
    y = panel.values

    def one(i):
        try:
            return detect_candidates(y[:, i], cfg), None
        except Exception as exc:  # noqa: BLE001 - collected per location
            return (), f"{type(exc).__name__}: {exc}"

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, range(panel.n)))
    else:
        results = [one(i) for i in range(panel.n)]
    errors = {i: msg for i, (_, msg) in enumerate(results) if msg is not None}
    if len(errors) == panel.n:
        raise RuntimeError(f"candidate detection failed at every location: {errors[0]}")
    out = CandidateSets(panel.T, tuple(s for s, _ in results),
                        tuple(labels) if labels is not None else None, errors)
    if out.total >= panel.T:
        msg = (f"step 1 kept {out.total} candidates, not fewer than T = {panel.T}; "
               "the joint problem is not reduced below one break per time point")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    log.info("step 1: %d candidates over %d locations", out.total, panel.n)
    return out
