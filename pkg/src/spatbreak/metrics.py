"""Performance measures comparing an estimate with the simulation truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "MetricReport",
    "specificity",
    "sensitivity",
    "weight_bias",
    "weight_mae",
    "mean_bias",
    "fitted_rmse",
    "evaluate",
]


def _w(a):
    return a.weights if hasattr(a, "weights") else np.asarray(a, dtype=float)


def _offdiag(w_true, w_hat, threshold=0.0):
    wt, wh = _w(w_true), _w(w_hat)
    if wt.shape != wh.shape or wt.ndim != 2 or wt.shape[0] != wt.shape[1]:
        raise ValueError("weight matrices must be square with equal shapes")
    mask = ~np.eye(wt.shape[0], dtype=bool)
    return wt[mask] != 0, np.abs(wh[mask]) > threshold, wt[mask], wh[mask]


def specificity(w_true, w_hat, threshold: float = 0.0, literal: bool = False) -> float:
    """Share of true zero links (off-diagonal) that are zero in the estimate.

    ``literal=True`` returns ``#zeros(w_hat) / #zeros(w_true)`` instead,
    which exceeds one when the estimate is sparser than the truth.
    NaN if the truth has no off-diagonal zeros.
    """
    t_nz, h_nz, _, _ = _offdiag(w_true, w_hat, threshold)
    denom = np.count_nonzero(~t_nz)
    if denom == 0:
        return math.nan
    num = np.count_nonzero(~h_nz) if literal else np.count_nonzero(~h_nz & ~t_nz)
    return num / denom


def sensitivity(w_true, w_hat, threshold: float = 0.0) -> float:
    """Share of true links (off-diagonal) that are nonzero in the estimate."""
    t_nz, h_nz, _, _ = _offdiag(w_true, w_hat, threshold)
    denom = np.count_nonzero(t_nz)
    if denom == 0:
        return math.nan
    return np.count_nonzero(h_nz & t_nz) / denom


def weight_bias(w_true, w_hat) -> float:
    _, _, wt, wh = _offdiag(w_true, w_hat)
    return float(np.mean(wh - wt)) if wt.size else math.nan


def weight_mae(w_true, w_hat) -> float:
    _, _, wt, wh = _offdiag(w_true, w_hat)
    return float(np.mean(np.abs(wh - wt))) if wt.size else math.nan


def mean_bias(a_true, a_hat) -> float:
    at, ah = np.asarray(a_true, dtype=float), np.asarray(a_hat, dtype=float)
    if at.shape != ah.shape:
        raise ValueError("mean-level matrices differ in shape")
    return float(np.mean(ah - at))


def fitted_rmse(panel, fitted) -> float:
    y = panel.values if hasattr(panel, "values") else np.asarray(panel, dtype=float)
    f = np.asarray(fitted, dtype=float)
    if y.shape != f.shape:
        raise ValueError("panel and fitted values differ in shape")
    return float(np.sqrt(np.mean((f - y) ** 2)))


@dataclass
class MetricReport:
    specificity: float
    sensitivity: float
    weight_bias: float
    mean_bias: float
    fitted_rmse: float
    weight_mae: float = math.nan

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(w_true, schedule_levels, panel, result, threshold: float = 0.0,
             literal_pi0: bool = False) -> MetricReport:
    return MetricReport(
        specificity=specificity(w_true, result.w_hat, threshold, literal=literal_pi0),
        sensitivity=sensitivity(w_true, result.w_hat, threshold),
        weight_bias=weight_bias(w_true, result.w_hat),
        mean_bias=mean_bias(schedule_levels, result.a_hat),
        fitted_rmse=fitted_rmse(panel, result.fitted),
        weight_mae=weight_mae(w_true, result.w_hat),
    )
