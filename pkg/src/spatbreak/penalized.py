"""Weighted lasso with box constraints, ridge pre-fits and cross-validation.

The lasso objective is

    ||X b + b0 - y||_2^2 + lam * sum_j w_j |b_j|,   lo_j <= b_j <= hi_j,

minimised by cyclic coordinate descent on the Gram matrix of the
unit-norm-scaled design ("covariance updates"). An infinite weight pins
the coefficient at zero.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import ConvergenceError

__all__ = [
    "PenalizedProblem",
    "LassoFit",
    "CvResult",
    "ridge_fit",
    "default_ridge_lambda",
    "soft_threshold_clip",
    "lasso_cd",
    "lasso_path",
    "lambda_grid",
    "cross_validate",
    "make_folds",
    "kkt_violations",
    "objective",
]

DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 100_000
N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-3


@dataclass(frozen=True)
class PenalizedProblem:
    """Design, response, per-coefficient penalty weights and box bounds.

    Parameters
    ----------
    design : (m, p) array
    response : (m,) array
    penalty_weights : (p,) array, optional
        Nonnegative, ``inf`` allowed (coefficient fixed at zero). Defaults
        to ones.
    lower_bounds, upper_bounds : (p,) arrays, optional
        Box constraints; ``-inf``/``inf`` by default. Zero must be feasible.
    intercept : bool
        Fit an unpenalized, unconstrained intercept.
    """

    design: NDArray[np.float64]
    response: NDArray[np.float64]
    penalty_weights: NDArray[np.float64] | None = None
    lower_bounds: NDArray[np.float64] | None = None
    upper_bounds: NDArray[np.float64] | None = None
    intercept: bool = False

    def __post_init__(self):
        x = np.asarray(self.design, dtype=float)
        y = np.asarray(self.response, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError(f"design shape {x.shape} does not match response length {y.size}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("design and response must be finite")
        p = x.shape[1]

        def vec(v, default):
            out = np.full(p, default, dtype=float) if v is None else np.asarray(v, dtype=float).ravel()
            if out.size != p:
                raise ValueError(f"expected a length-{p} vector, got {out.size}")
            return out

        w = vec(self.penalty_weights, 1.0)
        lo = vec(self.lower_bounds, -np.inf)
        hi = vec(self.upper_bounds, np.inf)
        if np.any(np.isnan(w)) or np.any(w < 0):
            raise ValueError("penalty weights must be nonnegative")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("bounds must contain zero")
        for name, val in (("design", x), ("response", y), ("penalty_weights", w),
                          ("lower_bounds", lo), ("upper_bounds", hi)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def subset(self, rows) -> "PenalizedProblem":
        return PenalizedProblem(self.design[rows], self.response[rows], self.penalty_weights,
                                self.lower_bounds, self.upper_bounds, self.intercept)


@dataclass
class LassoFit:
    coefficients: NDArray[np.float64]
    intercept_value: float
    lam: float
    objective: float
    iterations: int
    history: NDArray[np.float64] = field(default_factory=lambda: np.empty(0), repr=False)


@dataclass
class CvResult:
    lambda_grid: NDArray[np.float64]
    cv_mse: NDArray[np.float64]
    cv_se: NDArray[np.float64]
    lambda_min: float
    lambda_1se: float
    folds: NDArray[np.int64] = field(repr=False, default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def index_min(self) -> int:
        return int(np.flatnonzero(self.lambda_grid == self.lambda_min)[0])

    @property
    def index_1se(self) -> int:
        return int(np.flatnonzero(self.lambda_grid == self.lambda_1se)[0])


# ---------------------------------------------------------------------------
# ridge


def default_ridge_lambda(design: ArrayLike) -> float:
    """``0.01 * trace(X'X) / p``."""
    x = np.asarray(design, dtype=float)
    return 0.01 * float(np.einsum("ij,ij->", x, x)) / x.shape[1]


def ridge_fit(design: ArrayLike, response: ArrayLike, ridge_lambda: float) -> NDArray[np.float64]:
    """Solve ``(X'X + lam I) b = X'y``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the regularized system is numerically singular.
    """
    if not ridge_lambda > 0:
        raise ValueError("ridge_lambda must be positive")
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).ravel()
    a = x.T @ x
    a[np.diag_indices_from(a)] += ridge_lambda
    b = np.linalg.solve(a, x.T @ y)
    if not np.all(np.isfinite(b)):
        raise np.linalg.LinAlgError("ridge system is numerically singular")
    return b


# ---------------------------------------------------------------------------
# coordinate descent kernel


def soft_threshold_clip(z: float, threshold: float, lo: float, hi: float) -> float:
    """``clip(sign(z) * max(|z| - threshold, 0), lo, hi)``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if lo > 0 or hi < 0:
        raise ValueError("lo <= 0 <= hi required")
    return float(_stc(z, threshold, lo, hi))


@numba.njit(cache=True)
def _stc(z, thr, lo, hi):
    if z > thr:
        v = z - thr
    elif z < -thr:
        v = z + thr
    else:
        v = 0.0
    if v < lo:
        v = lo
    elif v > hi:
        v = hi
    return v


@numba.njit(cache=True)
def _pattern(beta, lo, hi, out):
    changed = False
    for j in range(beta.shape[0]):
        b = beta[j]
        if b == 0.0:
            v = 0
        elif b >= hi[j]:
            v = 2
        elif b <= lo[j]:
            v = -2
        elif b > 0.0:
            v = 1
        else:
            v = -1
        if v != out[j]:
            changed = True
            out[j] = v
    return changed


@numba.njit(cache=True)
def _polish(G, c, q, pen, lo, hi, lam, beta, pattern):
    """Active-set step on the current sign/bound pattern.

    Solves ``G_AA x_A = c_A - G_AB b_B - lam/2 pen_A sign(b_A)`` for the
    interior nonzero set ``A`` by Cholesky, then moves from ``beta`` towards
    ``x`` as far as signs and bounds allow. The objective is a convex
    quadratic along that segment, so it cannot increase. Returns 0 when the
    system is singular, 1 for a truncated step, 2 when ``x`` was reached.
    """
    p = G.shape[0]
    idx = np.empty(p, dtype=np.int64)
    na = 0
    for j in range(p):
        if pattern[j] == 1 or pattern[j] == -1:
            idx[na] = j
            na += 1
    if na == 0:
        return 0
    L = np.zeros((na, na))
    rhs = np.empty(na)
    for a in range(na):
        j = idx[a]
        # q_j = c_j - sum_k G_jk b_k, so c_j - G_jB b_B = q_j + G_jA b_A
        r = q[j] - 0.5 * lam * pen[j] * pattern[j]
        for e in range(na):
            r += G[j, idx[e]] * beta[idx[e]]
        rhs[a] = r
    for a in range(na):
        for e in range(a + 1):
            v = G[idx[a], idx[e]]
            for f in range(e):
                v -= L[a, f] * L[e, f]
            if a == e:
                if v <= 1e-10 * G[idx[a], idx[a]]:
                    return 0
                L[a, a] = np.sqrt(v)
            else:
                L[a, e] = v / L[e, e]
    z = np.empty(na)
    for a in range(na):
        v = rhs[a]
        for f in range(a):
            v -= L[a, f] * z[f]
        z[a] = v / L[a, a]
    x = np.empty(na)
    for a in range(na - 1, -1, -1):
        v = z[a]
        for f in range(a + 1, na):
            v -= L[f, a] * x[f]
        x[a] = v / L[a, a]
    step = 1.0
    hit = -1
    hit_val = 0.0
    for a in range(na):
        j = idx[a]
        b = beta[j]
        if x[a] * pattern[j] <= 0.0:
            t = b / (b - x[a])
            v = 0.0
        elif x[a] >= hi[j]:
            t = (hi[j] - b) / (x[a] - b)
            v = hi[j]
        elif x[a] <= lo[j]:
            t = (lo[j] - b) / (x[a] - b)
            v = lo[j]
        else:
            continue
        if t < step:
            step = t
            hit = a
            hit_val = v
    for a in range(na):
        j = idx[a]
        new = beta[j] + step * (x[a] - beta[j])
        if a == hit:
            new = hit_val
        d = new - beta[j]
        if d != 0.0:
            for k in range(p):
                q[k] -= G[j, k] * d
            beta[j] = new
    return 2 if hit < 0 else 1


@numba.njit(cache=True, nogil=True)
def _cd_kernel(G, c, yy, pen, lo, hi, free, lam, beta, tol, max_sweeps, history, polish):
    """Cyclic CD on the Gram form; ``beta`` is updated in place.

    Maintains ``q = c - G beta`` (the scaled correlations with the residual).
    Alternates full sweeps with sweeps over the current nonzero set; once a
    sweep leaves the sign/bound pattern unchanged, the active-set solution is
    tried directly (``polish``). Returns ``(sweeps, converged)``.
    """
    p = G.shape[0]
    q = c.copy()
    for j in range(p):
        bj = beta[j]
        if bj != 0.0:
            for k in range(p):
                q[k] -= G[j, k] * bj
    pattern = np.zeros(p, dtype=np.int64)
    _pattern(beta, lo, hi, pattern)
    full = True
    sweeps = 0
    nh = history.shape[0]
    while sweeps < max_sweeps:
        maxd = 0.0
        for j in range(p):
            if not free[j]:
                continue
            bj = beta[j]
            if not full and bj == 0.0:
                continue
            gjj = G[j, j]
            # relative slack keeps the grid's first fit exactly null under rounding
            new = _stc(bj + q[j] / gjj, (1.0 + 1e-12) * lam * pen[j] / (2.0 * gjj), lo[j], hi[j])
            d = new - bj
            if d != 0.0:
                for k in range(p):
                    q[k] -= G[j, k] * d
                beta[j] = new
                ad = abs(d)
                if ad > maxd:
                    maxd = ad
        if sweeps < nh:
            f = yy
            for j in range(p):
                bj = beta[j]
                if bj != 0.0:
                    f -= (c[j] + q[j]) * bj
                    f += lam * pen[j] * abs(bj)
            history[sweeps] = f
        sweeps += 1
        changed = _pattern(beta, lo, hi, pattern)
        bmax = 0.0
        for j in range(p):
            if abs(beta[j]) > bmax:
                bmax = abs(beta[j])
        if maxd < tol * max(1.0, bmax):
            if full:
                return sweeps, True
            full = True
        else:
            full = False
            if polish and not changed:
                status = _polish(G, c, q, pen, lo, hi, lam, beta, pattern)
                if status == 2:
                    full = True
                elif status == 1:
                    _pattern(beta, lo, hi, pattern)
    return sweeps, False


# ---------------------------------------------------------------------------
# problem preparation


@dataclass
class _Moments:
    xtx: NDArray[np.float64]
    xty: NDArray[np.float64]
    yty: float
    xsum: NDArray[np.float64]
    ysum: float
    m: int

    @classmethod
    def of(cls, x, y):
        return cls(x.T @ x, x.T @ y, float(y @ y), x.sum(axis=0), float(y.sum()), x.shape[0])

    def __sub__(self, other):
        return _Moments(self.xtx - other.xtx, self.xty - other.xty, self.yty - other.yty,
                        self.xsum - other.xsum, self.ysum - other.ysum, self.m - other.m)


@dataclass
class _Prepared:
    G: NDArray[np.float64]
    c: NDArray[np.float64]
    yy: float
    scale: NDArray[np.float64]
    pen: NDArray[np.float64]
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    free: NDArray[np.bool_]
    xmean: NDArray[np.float64]
    ymean: float

    def to_scaled(self, beta):
        return np.where(self.free, beta * self.scale, 0.0)

    def from_scaled(self, b):
        beta = np.zeros_like(b)
        np.divide(b, self.scale, out=beta, where=self.free)
        return beta

    def intercept(self, beta) -> float:
        return float(self.ymean - self.xmean @ beta)


def _prepare(problem: PenalizedProblem, mom: _Moments) -> _Prepared:
    xtx, xty, yty = mom.xtx, mom.xty, mom.yty
    p = xtx.shape[0]
    if problem.intercept:
        xmean = mom.xsum / mom.m
        ymean = mom.ysum / mom.m
        xtx = xtx - mom.m * np.outer(xmean, xmean)
        xty = xty - mom.m * xmean * ymean
        yty = yty - mom.m * ymean**2
    else:
        xmean = np.zeros(p)
        ymean = 0.0
    d = np.clip(np.diag(xtx), 0.0, None)
    scale = np.sqrt(d)
    w = problem.penalty_weights
    free = (scale > 1e-12 * max(1.0, scale.max(initial=0.0))) & np.isfinite(w)
    free &= ~((problem.lower_bounds == 0) & (problem.upper_bounds == 0))
    s = np.where(free, scale, 1.0)
    G = xtx / np.outer(s, s)
    free &= ~_shadowed(G, w / s, free, problem.lower_bounds, problem.upper_bounds)
    np.fill_diagonal(G, np.where(free, 1.0, G.diagonal()))
    c = xty / s
    pen = np.where(free, w / s, 0.0)
    lo = problem.lower_bounds * s
    hi = problem.upper_bounds * s
    return _Prepared(np.ascontiguousarray(G), c, float(yty), s, pen, lo, hi, free, xmean, ymean)


def _shadowed(G, pen, free, lo, hi):
    """Unbounded free columns that duplicate a column with a smaller penalty.

    For identical (scaled) columns the lasso puts all mass on the one with
    the smallest weight, so the others can be pinned at zero. Duplicates
    arise in cross-validation splits of the step design.
    """
    out = np.zeros(free.size, dtype=bool)
    cand = np.flatnonzero(free & np.isinf(lo) & np.isinf(hi))
    if cand.size < 2:
        return out
    sub = G[np.ix_(cand, cand)]
    dup = np.triu(sub >= 1.0 - 1e-12, k=1)
    for a, b in zip(*np.nonzero(dup)):
        ja, jb = cand[a], cand[b]
        if out[ja] or out[jb]:
            continue
        out[jb if pen[jb] >= pen[ja] else ja] = True
    return out


def objective(problem: PenalizedProblem, coefficients, intercept_value: float, lam: float) -> float:
    """Penalized objective evaluated directly on the original design."""
    beta = np.asarray(coefficients, dtype=float)
    r = problem.response - problem.design @ beta - intercept_value
    nz = beta != 0
    return float(r @ r + lam * np.sum(problem.penalty_weights[nz] * np.abs(beta[nz])))


def _solve(prep: _Prepared, lam: float, b0, tol, max_sweeps, n_history=0, polish=True):
    b = np.ascontiguousarray(b0, dtype=float).copy()
    hist = np.empty(n_history)
    sweeps, ok = _cd_kernel(prep.G, prep.c, prep.yy, prep.pen, prep.lo, prep.hi, prep.free,
                            float(lam), b, tol, max_sweeps, hist, polish)
    if not ok:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_sweeps} sweeps at lambda={lam:.6g}",
            last_iterate=prep.from_scaled(b), sweeps=sweeps,
        )
    # rounding residue from polish solves on (near-)collinear columns
    b[np.abs(b) <= 1e-12 * max(1.0, float(np.abs(b).max(initial=0.0)))] = 0.0
    return b, sweeps, hist[: min(sweeps, n_history)]


def lasso_cd(problem: PenalizedProblem, lam: float, warm_start=None, tol: float = DEFAULT_TOL,
             max_sweeps: int = DEFAULT_MAX_SWEEPS, trace: bool = False) -> LassoFit:
    """Weighted, box-constrained lasso at a single ``lam``.

    Convergence is declared when a full sweep moves no scaled coefficient by
    more than ``tol * max(1, max|b|)``. With ``trace=True`` the objective
    after every sweep (in the scaled parametrisation, which has the same
    value) is kept in ``LassoFit.history``.

    Raises
    ------
    ConvergenceError
        If ``max_sweeps`` is exhausted.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    prep = _prepare(problem, _Moments.of(problem.design, problem.response))
    if warm_start is None:
        b0 = np.zeros(problem.p)
    else:
        ws = np.asarray(warm_start, dtype=float)
        if np.any(ws < problem.lower_bounds) or np.any(ws > problem.upper_bounds):
            raise ValueError("warm start violates the box constraints")
        b0 = prep.to_scaled(ws)
    b, sweeps, hist = _solve(prep, lam, b0, tol, max_sweeps, n_history=max_sweeps if trace else 0)
    beta = _clean(prep.from_scaled(b), problem)
    b0_ = prep.intercept(beta) if problem.intercept else 0.0
    return LassoFit(beta, b0_, float(lam), objective(problem, beta, b0_, lam), sweeps, hist)


def _clean(beta, problem):
    # undo rounding from the scaling round trip so bounds hold exactly
    return np.clip(beta, problem.lower_bounds, problem.upper_bounds)


def _path(prep: _Prepared, lambdas, tol, max_sweeps):
    p = prep.G.shape[0]
    out = np.zeros((len(lambdas), p))
    b = np.zeros(p)
    for k, lam in enumerate(lambdas):
        b, _, _ = _solve(prep, lam, b, tol, max_sweeps)
        out[k] = prep.from_scaled(b)
    return out


def lasso_path(problem: PenalizedProblem, lambdas=None, tol: float = DEFAULT_TOL,
               max_sweeps: int = DEFAULT_MAX_SWEEPS):
    """Warm-started fits along a decreasing ``lambdas`` sequence.

    Returns
    -------
    lambdas : (L,) array
    coefs : (L, p) array
    intercepts : (L,) array
    """
    lambdas = lambda_grid(problem) if lambdas is None else np.asarray(lambdas, dtype=float)
    prep = _prepare(problem, _Moments.of(problem.design, problem.response))
    coefs = _clean(_path(prep, lambdas, tol, max_sweeps), problem)
    icpt = prep.ymean - coefs @ prep.xmean if problem.intercept else np.zeros(len(lambdas))
    return lambdas, coefs, icpt


def lambda_max(problem: PenalizedProblem) -> float:
    w = problem.penalty_weights
    ok = np.isfinite(w) & (w > 0)
    if not np.any(ok):
        raise ValueError("no finite positive penalty weight; lambda grid undefined")
    y = problem.response - problem.response.mean() if problem.intercept else problem.response
    grad = 2.0 * np.abs(problem.design[:, ok].T @ y)
    return float(np.max(grad / w[ok]))


def lambda_grid(problem: PenalizedProblem, n_lambda: int = N_LAMBDA,
                min_ratio: float = LAMBDA_MIN_RATIO) -> NDArray[np.float64]:
    """Geometric grid from ``lambda_max`` down to ``min_ratio * lambda_max``.

    Raises
    ------
    ValueError
        If every penalty weight is infinite, or the response is orthogonal
        to every penalized column (``lambda_max == 0``).
    """
    lmax = lambda_max(problem)
    if not lmax > 0:
        raise ValueError("lambda_max is zero; response carries no signal for the penalized columns")
    return np.geomspace(lmax, min_ratio * lmax, n_lambda)


def make_folds(m: int, k: int, seed=None) -> NDArray[np.int64]:
    """Balanced random fold labels ``0..k-1`` for ``m`` rows."""
    rng = np.random.default_rng(seed)
    folds = np.empty(m, dtype=np.int64)
    folds[rng.permutation(m)] = np.arange(m) % k
    return folds


def cross_validate(problem: PenalizedProblem, k: int = 10, seed=None, folds=None, lambdas=None,
                   weight_fn=None, tol: float = DEFAULT_TOL,
                   max_sweeps: int = DEFAULT_MAX_SWEEPS) -> CvResult:
    """K-fold CV over the lambda grid with the one-standard-error rule.

    Fold labels may be passed explicitly through ``folds``; otherwise rows
    are assigned uniformly at random (balanced) from ``seed``. The grid is
    computed on the full data.

    ``weight_fn(train_rows) -> penalty_weights``, if given, recomputes the
    penalty weights on each training split (``train_rows`` is a boolean
    row mask). Adaptive weights derived
    from the full sample carry information about the held-out rows and bias
    the CV error towards dense fits, so data-driven weights should be
    passed this way.
    """
    m = problem.m
    if folds is None:
        if k < 2:
            raise ValueError("k must be at least 2")
        if m < 2 * k:
            raise ValueError(f"need at least 2k = {2 * k} rows for {k}-fold CV, got {m}")
        folds = make_folds(m, k, seed)
    else:
        folds = np.asarray(folds, dtype=np.int64)
        if folds.shape != (m,):
            raise ValueError("folds must label every row")
    labels = np.unique(folds)
    if labels.size < 2:
        raise ValueError("cross-validation needs at least two folds")
    lambdas = lambda_grid(problem) if lambdas is None else np.asarray(lambdas, dtype=float)

    x, y = problem.design, problem.response
    full = _Moments.of(x, y)
    errs = np.empty((labels.size, lambdas.size))
    for f, lab in enumerate(labels):
        held = folds == lab
        if held.sum() < 1 or held.sum() == m:
            raise ValueError(f"degenerate fold {lab}")
        mom = full - _Moments.of(x[held], y[held])
        sub = problem
        if weight_fn is not None:
            sub = dataclasses.replace(problem, penalty_weights=weight_fn(~held))
        prep = _prepare(sub, mom)
        coefs = _path(prep, lambdas, tol, max_sweeps)
        pred = x[held] @ coefs.T
        if problem.intercept:
            pred += prep.ymean - coefs @ prep.xmean
        errs[f] = np.mean((y[held, None] - pred) ** 2, axis=0)

    mse = errs.mean(axis=0)
    se = errs.std(axis=0, ddof=1) / math.sqrt(labels.size)
    i_min = int(np.argmin(mse))
    ok = np.flatnonzero(mse <= mse[i_min] + se[i_min])
    i_1se = int(ok.min())  # grid is decreasing: smallest index is the largest lambda
    return CvResult(lambdas, mse, se, float(lambdas[i_min]), float(lambdas[i_1se]), folds)


def kkt_violations(problem: PenalizedProblem, coefficients, intercept_value: float, lam: float):
    """Per-coefficient violation of the box-constrained lasso optimality conditions.

    With ``g_j = -2 x_j' r`` the gradient of the squared loss, a coordinate
    is optimal when ``0`` lies in ``g_j + lam w_j d|b_j| + N_[lo, hi](b_j)``.
    Returns the distance of that set from zero, per coordinate (zero for
    coefficients pinned by an infinite weight, unless they are nonzero).
    """
    beta = np.asarray(coefficients, dtype=float)
    r = problem.response - problem.design @ beta - intercept_value
    g = -2.0 * problem.design.T @ r
    w, lo, hi = problem.penalty_weights, problem.lower_bounds, problem.upper_bounds
    out = np.zeros(beta.size)
    for j in range(beta.size):
        b = beta[j]
        if not np.isfinite(w[j]):
            out[j] = abs(b) * np.inf if b != 0 else 0.0
            continue
        pw = lam * w[j]
        if b > 0:
            lo_s, hi_s = g[j] + pw, g[j] + pw
        elif b < 0:
            lo_s, hi_s = g[j] - pw, g[j] - pw
        else:
            lo_s, hi_s = g[j] - pw, g[j] + pw
        # normal cone of the box: [0, inf) at the upper bound, (-inf, 0] at the lower
        if b >= hi[j]:
            hi_s = np.inf
        if b <= lo[j]:
            lo_s = -np.inf
        out[j] = max(lo_s, 0.0) + max(-hi_s, 0.0)
    return out
