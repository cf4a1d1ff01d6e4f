"""Core types for the spatiotemporal autoregressive panel.

The process at time ``t`` is

    y_t = W y_t + a_t + e_t,   i.e.   y_t = (I - W)^{-1} (a_t + e_t),

with a time-constant spatial weights matrix ``W`` (zero diagonal) and
piecewise-constant local mean levels ``a_t``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "SpatialWeightMatrix",
    "PanelObservations",
    "MeanLevelSchedule",
    "ModelSpec",
    "ConvergenceError",
    "StationarityError",
    "spectral_radius",
    "reduced_form",
    "expected_panel",
    "row_standardize",
]

ROW_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Iterative routine hit its iteration cap.

    The last iterate (and any other diagnostics) are attached as attributes.
    """

    def __init__(self, message: str, last_iterate=None, **diagnostics):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.diagnostics = diagnostics


class StationarityError(ValueError):
    """``I - W`` is singular or the process is not stationary."""

    def __init__(self, message: str, spectral_radius: float):
        super().__init__(f"{message} (spectral radius {spectral_radius:.6g})")
        self.spectral_radius = spectral_radius


def _frozen(a: ArrayLike) -> NDArray[np.float64]:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def row_standardize(a: ArrayLike) -> NDArray[np.float64]:
    """Scale each nonzero row of a nonnegative matrix to sum to one."""
    a = np.asarray(a, dtype=float)
    sums = a.sum(axis=1, keepdims=True)
    out = np.zeros_like(a)
    np.divide(a, sums, out=out, where=sums > 0)
    return out


@dataclass(frozen=True)
class SpatialWeightMatrix:
    """Nonnegative ``n x n`` spatial weights with zero diagonal.

    Parameters
    ----------
    weights : array_like
        Square matrix with entries in ``[0, 1]``.
    row_standardized : bool
        If True, every nonzero row must sum to one.
    """

    weights: NDArray[np.float64]
    row_standardized: bool = False

    def __post_init__(self):
        w = _frozen(self.weights)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ValueError(f"weights must be a non-empty square matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(np.diag(w) != 0.0):
            raise ValueError("diagonal of a spatial weights matrix must be exactly zero")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("spatial weights must lie in [0, 1]")
        if self.row_standardized:
            sums = w.sum(axis=1)
            nz = np.any(w != 0.0, axis=1)
            if np.any(np.abs(sums[nz] - 1.0) > ROW_SUM_TOL):
                raise ValueError("row-standardized matrix has a nonzero row not summing to 1")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def scaled(self, rho: float) -> "SpatialWeightMatrix":
        """Return ``rho * W`` (no longer flagged row-standardized unless rho == 1)."""
        return SpatialWeightMatrix(rho * self.weights, row_standardized=self.row_standardized and rho == 1.0)


@dataclass(frozen=True)
class PanelObservations:
    """``T x n`` panel; rows are time points, columns are locations."""

    values: NDArray[np.float64]

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"panel must be a non-empty T x n matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("panel contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MeanLevelSchedule:
    """Piecewise-constant local means ``a[t, i]``.

    ``change_points[i]`` holds the 1-based indices ``tau`` with
    ``a[tau, i] != a[tau + 1, i]``, i.e. the last time point of the old level.
    """

    levels: NDArray[np.float64]
    change_points: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        lv = _frozen(self.levels)
        if lv.ndim != 2:
            raise ValueError("levels must be a T x n matrix")
        object.__setattr__(self, "levels", lv)
        jumps = lv[1:] != lv[:-1]
        cps = tuple(tuple(int(t) + 1 for t in np.flatnonzero(jumps[:, i])) for i in range(lv.shape[1]))
        object.__setattr__(self, "change_points", cps)

    @property
    def T(self) -> int:
        return self.levels.shape[0]

    @property
    def n(self) -> int:
        return self.levels.shape[1]

    @classmethod
    def from_breaks(cls, T: int, baselines: ArrayLike, breaks: dict[int, list[tuple[int, float]]]):
        """Build levels from baselines and ``{i: [(onset, jump), ...]}``.

        ``onset`` is the 1-based first time point of the new level.
        """
        base = np.asarray(baselines, dtype=float)
        jumps = np.zeros((T, base.size))
        jumps[0] = base
        for i, items in breaks.items():
            for onset, size in items:
                jumps[onset - 1, i] += size
        return cls(np.cumsum(jumps, axis=0))


@dataclass(frozen=True)
class ModelSpec:
    weights: SpatialWeightMatrix
    schedule: MeanLevelSchedule
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.weights.n != self.schedule.n:
            raise ValueError("weights and schedule disagree on the number of locations")
        if not self.noise_sd >= 0.0:
            raise ValueError("noise_sd must be nonnegative")
        rho = spectral_radius(self.weights)
        if rho >= 1.0:
            raise StationarityError("model is not stationary", rho)


def _as_matrix(w) -> NDArray[np.float64]:
    return w.weights if isinstance(w, SpatialWeightMatrix) else np.asarray(w, dtype=float)


_SR_WINDOW = 20


def spectral_radius(w, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest absolute eigenvalue of a nonnegative square matrix.

    Power iteration on the shifted matrix ``I + W``, which shares the Perron
    vector of ``W`` but is aperiodic, so the iteration also converges for
    bipartite patterns such as ``[[0, a], [a, 0]]``.

    Raises
    ------
    ConvergenceError
        If the relative change of the estimate stays above ``tol`` after
        ``max_iter`` iterations.
    """
    a = _as_matrix(w)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("spectral_radius needs a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if np.any(a < 0):
        # Perron-Frobenius does not apply
        return float(np.max(np.abs(np.linalg.eigvals(a))))
    n = a.shape[0]
    if not np.any(a):
        return 0.0
    x = np.full(n, 1.0 / n)
    est = np.inf
    # complex subdominant eigenvalues make the increments oscillate through
    # zero, so convergence is judged on the largest step in a trailing window
    window = deque(maxlen=_SR_WINDOW)
    for _ in range(max_iter):
        y = x + a @ x
        s = y.sum()
        new = s - 1.0
        x = y / s
        window.append(abs(new - est))
        if len(window) == _SR_WINDOW and max(window) <= tol * max(abs(new), 1.0):
            return float(max(new, 0.0))
        est = new
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", last_iterate=x, estimate=est
    )


def reduced_form(w, tol: float = 1e-10) -> NDArray[np.float64]:
    """Return ``S = (I - W)^{-1}`` by LU solve.

    Raises
    ------
    StationarityError
        When ``rho(W) >= 1`` or ``I - W`` is numerically singular.
    """
    a = _as_matrix(w)
    try:
        rho = spectral_radius(a)
    except ConvergenceError:
        # slow power iteration (e.g. defective Perron root); dense fallback
        rho = float(np.max(np.abs(np.linalg.eigvals(a))))
    if rho >= 1.0:
        raise StationarityError("I - W is not invertible through a stationary process", rho)
    n = a.shape[0]
    eye = np.eye(n)
    try:
        s = np.linalg.solve(eye - a, eye)
    except np.linalg.LinAlgError as exc:
        raise StationarityError("I - W is singular", rho) from exc
    resid = np.max(np.abs((eye - a) @ s - eye))
    if not np.isfinite(resid) or resid >= tol:
        raise StationarityError(f"I - W is near-singular (residual {resid:.3g})", rho)
    return s


def expected_panel(spec: ModelSpec) -> NDArray[np.float64]:
    """Overall mean level ``E(y_t) = S a_t`` stacked as a ``T x n`` matrix."""
    s = reduced_form(spec.weights)
    return spec.schedule.levels @ s.T
