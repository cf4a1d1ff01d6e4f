import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatbreak.model import ConvergenceError
from spatbreak.penalized import (
    PenalizedProblem,
    cross_validate,
    default_ridge_lambda,
    kkt_violations,
    lambda_grid,
    lasso_cd,
    lasso_path,
    make_folds,
    objective,
    ridge_fit,
    soft_threshold_clip,
)


def gauss_solve(a, b):
    # textbook Gaussian elimination with partial pivoting
    a = [list(map(float, row)) + [float(v)] for row, v in zip(a, b)]
    n = len(a)
    for k in range(n):
        piv = max(range(k, n), key=lambda i: abs(a[i][k]))
        a[k], a[piv] = a[piv], a[k]
        for i in range(k + 1, n):
            f = a[i][k] / a[k][k]
            for j in range(k, n + 1):
                a[i][j] -= f * a[k][j]
    x = [0.0] * n
    for i in reversed(range(n)):
        x[i] = (a[i][n] - sum(a[i][j] * x[j] for j in range(i + 1, n))) / a[i][i]
    return np.array(x)


def lattice_min(x, y, lam, step=0.001):
    """Exhaustive search over a lattice on [0, 1]^(p-1); last coordinate profiled exactly."""
    p = x.shape[1]
    grid = np.arange(0.0, 1.0 + step / 2, step)
    last = x[:, -1]
    nn = last @ last
    if p == 1:
        pts = np.zeros((1, 0))
    elif p == 2:
        pts = grid[:, None]
    else:
        g1, g2 = np.meshgrid(grid, grid, indexing="ij")
        pts = np.column_stack([g1.ravel(), g2.ravel()])
    # residual before the last coordinate, one column per lattice point
    r = y[:, None] - x[:, :-1] @ pts.T
    z = last @ r
    b = np.clip(np.maximum(z - lam / 2, 0.0) / nn, 0.0, 1.0)
    res = r - np.outer(last, b)
    obj = np.einsum("ij,ij->j", res, res) + lam * (pts.sum(axis=1) + b)
    return float(obj.min())


class TestRidge:
    def test_identity_example(self):
        assert np.allclose(ridge_fit(np.eye(2), [2.0, 4.0], 1.0), [1.0, 2.0])

    def test_shrinkage_limit(self):
        rng = np.random.default_rng(0)
        b = ridge_fit(rng.normal(size=(15, 4)), rng.normal(size=15), 1e12)
        assert np.all(np.abs(b) < 1e-6)

    def test_gaussian_elimination_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 5))
        y = rng.normal(size=20)
        a = x.T @ x + 0.7 * np.eye(5)
        ref = gauss_solve(a.tolist(), (x.T @ y).tolist())
        assert np.allclose(ridge_fit(x, y, 0.7), ref, atol=1e-8)

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_rejects_nonpositive(self, lam):
        with pytest.raises(ValueError):
            ridge_fit(np.eye(2), [1.0, 1.0], lam)

    def test_default_lambda(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert default_ridge_lambda(x) == pytest.approx(0.01 * 30 / 2)


class TestSoftThreshold:
    @pytest.mark.parametrize(
        "args, expected",
        [
            ((3.0, 1.0, -np.inf, np.inf), 2.0),
            ((-0.5, 1.0, -np.inf, np.inf), 0.0),
            ((3.0, 1.0, 0.0, 1.0), 1.0),
            ((-3.0, 1.0, 0.0, 1.0), 0.0),
            ((-3.0, 1.0, -np.inf, np.inf), -2.0),
        ],
    )
    def test_examples(self, args, expected):
        assert soft_threshold_clip(*args) == expected

    def test_rejects_infeasible_box(self):
        with pytest.raises(ValueError):
            soft_threshold_clip(1.0, 0.0, 0.5, 1.0)


class TestProblem:
    def test_zero_must_be_feasible(self):
        with pytest.raises(ValueError, match="zero"):
            PenalizedProblem(np.eye(2), np.ones(2), lower_bounds=[0.1, 0.0])

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            PenalizedProblem(np.eye(2), np.ones(2), penalty_weights=[1.0, -1.0])

    def test_rejects_nonfinite_design(self):
        with pytest.raises(ValueError):
            PenalizedProblem(np.array([[np.nan]]), np.ones(1))


class TestLassoCd:
    def test_lambda_zero_is_least_squares(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 6)) + 3 * np.eye(6)
        y = rng.normal(size=6)
        fit = lasso_cd(PenalizedProblem(x, y), 0.0)
        assert np.allclose(fit.coefficients, np.linalg.solve(x, y), atol=1e-6)

    def test_lambda_max_gives_zero(self):
        rng = np.random.default_rng(3)
        prob = PenalizedProblem(rng.normal(size=(30, 8)), rng.normal(size=30))
        grid = lambda_grid(prob)
        assert not lasso_cd(prob, grid[0]).coefficients.any()
        assert lasso_cd(prob, grid[1]).coefficients.any()

    @pytest.mark.parametrize("p", [1, 2, 3])
    @pytest.mark.parametrize("seed", range(3))
    def test_lattice_oracle(self, p, seed):
        rng = np.random.default_rng(100 * p + seed)
        x = rng.normal(size=(12, p))
        y = x @ rng.uniform(-0.5, 1.5, size=p) + 0.5 * rng.normal(size=12)
        lam = float(rng.uniform(0.5, 5.0))
        prob = PenalizedProblem(x, y, lower_bounds=np.zeros(p), upper_bounds=np.ones(p))
        fit = lasso_cd(prob, lam)
        ref = lattice_min(x, y, lam)
        assert abs(fit.objective - ref) <= 2e-3
        # the solver cannot beat the true minimum, which lies below the lattice one
        assert fit.objective <= ref + 1e-9

    def test_orthonormal_positive_closed_form(self):
        rng = np.random.default_rng(4)
        q, _ = np.linalg.qr(rng.normal(size=(20, 5)))
        y = rng.normal(size=20) * 2
        w = rng.uniform(0.5, 2.0, size=5)
        lam = 1.3
        prob = PenalizedProblem(q, y, penalty_weights=w, lower_bounds=np.zeros(5))
        ref = np.maximum(q.T @ y - lam * w / 2, 0.0)
        assert np.allclose(lasso_cd(prob, lam).coefficients, ref, atol=1e-8)

    def test_infinite_weight_pins_zero(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(20, 3))
        y = x @ np.array([1.0, 2.0, 3.0])
        prob = PenalizedProblem(x, y, penalty_weights=[1.0, np.inf, 1.0])
        fit = lasso_cd(prob, 0.1)
        assert fit.coefficients[1] == 0.0
        assert np.all(kkt_violations(prob, fit.coefficients, 0.0, 0.1) < 1e-5)

    def test_intercept(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(50, 2))
        y = 4.0 + x @ np.array([1.0, 0.0])
        fit = lasso_cd(PenalizedProblem(x, y, intercept=True), 0.0)
        assert fit.intercept_value == pytest.approx(4.0, abs=1e-6)
        assert np.allclose(fit.coefficients, [1.0, 0.0], atol=1e-6)

    def test_duplicate_columns(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=30)
        x = np.column_stack([a, a, rng.normal(size=30)])
        y = 2 * a + rng.normal(size=30) * 0.1
        prob = PenalizedProblem(x, y)
        fit = lasso_cd(prob, 0.5)
        assert fit.coefficients[:2].sum() == pytest.approx(
            lasso_cd(PenalizedProblem(x[:, 1:], y), 0.5).coefficients[0], abs=1e-6
        )
        assert np.all(kkt_violations(prob, fit.coefficients, 0.0, 0.5) < 1e-5)

    def test_warm_start_must_be_feasible(self):
        prob = PenalizedProblem(np.eye(2), np.ones(2), lower_bounds=[0, 0], upper_bounds=[1, 1])
        with pytest.raises(ValueError):
            lasso_cd(prob, 0.1, warm_start=[2.0, 0.0])

    def test_sweep_cap(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 10))
        x[:, 1] = x[:, 0] + 1e-3 * rng.normal(size=40)
        prob = PenalizedProblem(x, rng.normal(size=40))
        with pytest.raises(ConvergenceError):
            lasso_cd(prob, 1e-6, max_sweeps=1)

    def test_objective_history_monotone(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(40, 10))
        x[:, 1] = x[:, 0] + 0.1 * rng.normal(size=40)
        y = x[:, 0] + rng.normal(size=40)
        prob = PenalizedProblem(x, y, lower_bounds=np.full(10, -0.5), upper_bounds=np.ones(10))
        fit = lasso_cd(prob, 2.0, trace=True)
        h = fit.history
        assert h.size >= 1
        assert np.all(np.diff(h) <= 1e-9 * np.maximum(1.0, np.abs(h[:-1])))
        assert h[-1] == pytest.approx(fit.objective, rel=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(0, 10_000),
        st.integers(1, 8),
        st.floats(0.0, 1.0),
        st.booleans(),
        st.booleans(),
    )
    def test_kkt_property(self, seed, p, frac, boxed, icpt):
        rng = np.random.default_rng(seed)
        m = 25
        x = rng.normal(size=(m, p))
        y = x @ rng.normal(size=p) + rng.normal(size=m)
        w = rng.uniform(0.2, 3.0, size=p)
        w[rng.random(p) < 0.2] = np.inf
        lo = np.where(rng.random(p) < 0.5, 0.0, -np.inf) if boxed else None
        hi = np.where(rng.random(p) < 0.5, 1.0, np.inf) if boxed else None
        prob = PenalizedProblem(x, y, w, lo, hi, intercept=icpt)
        if not np.any(np.isfinite(w)):
            return
        lam = frac * lambda_grid(prob)[0]
        fit = lasso_cd(prob, lam)
        b = fit.coefficients
        assert np.all(b >= prob.lower_bounds) and np.all(b <= prob.upper_bounds)
        assert np.all(b[~np.isfinite(w)] == 0)
        scale = max(1.0, float(np.abs(x.T @ y).max()))
        assert np.all(kkt_violations(prob, b, fit.intercept_value, lam) <= 1e-5 * scale)
        assert fit.objective == pytest.approx(objective(prob, b, fit.intercept_value, lam))
        # never worse than the feasible null model
        null_icpt = y.mean() if icpt else 0.0
        assert fit.objective <= objective(prob, np.zeros(p), null_icpt, lam) + 1e-9


class TestPath:
    def test_warm_equals_cold(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(40, 12))
        y = x[:, :3] @ np.array([2.0, -1.0, 0.5]) + rng.normal(size=40)
        prob = PenalizedProblem(x, y, upper_bounds=np.full(12, 1.0))
        lambdas, coefs, _ = lasso_path(prob)
        for k in range(0, lambdas.size, 7):
            cold = lasso_cd(prob, lambdas[k]).coefficients
            assert np.allclose(coefs[k], cold, atol=1e-6)

    def test_grid_shape(self):
        rng = np.random.default_rng(11)
        prob = PenalizedProblem(rng.normal(size=(20, 4)), rng.normal(size=20))
        g = lambda_grid(prob)
        assert g.size == 100
        assert np.all(np.diff(g) < 0)
        ratios = g[1:] / g[:-1]
        assert np.allclose(ratios, ratios[0])
        assert g[-1] / g[0] == pytest.approx(1e-3)

    def test_doubling_weights_halves_lambda_max(self):
        rng = np.random.default_rng(12)
        x, y = rng.normal(size=(20, 4)), rng.normal(size=20)
        w = rng.uniform(0.5, 2, size=4)
        a = lambda_grid(PenalizedProblem(x, y, w))[0]
        b = lambda_grid(PenalizedProblem(x, y, 2 * w))[0]
        assert b == pytest.approx(a / 2)

    def test_lambda_max_uses_centered_response_with_intercept(self):
        x = np.array([[1.0], [2.0], [3.0]])
        y = np.array([5.0, 5.0, 8.0])
        assert lambda_grid(PenalizedProblem(x, y, intercept=True))[0] == pytest.approx(2 * 3.0)

    def test_all_infinite_weights_rejected(self):
        with pytest.raises(ValueError, match="penalty weight"):
            lambda_grid(PenalizedProblem(np.eye(2), np.ones(2), penalty_weights=[np.inf, np.inf]))

    def test_orthogonal_response_rejected(self):
        with pytest.raises(ValueError, match="lambda_max"):
            lambda_grid(PenalizedProblem(np.array([[1.0], [0.0]]), np.array([0.0, 1.0])))


class TestCrossValidate:
    def test_noise_selects_null_model(self):
        hits = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(60, 8))
            y = rng.normal(size=60)
            prob = PenalizedProblem(x, y, intercept=True)
            cv = cross_validate(prob, k=10, seed=seed)
            nz = np.count_nonzero(lasso_cd(prob, cv.lambda_1se).coefficients)
            hits += nz <= 1
        assert hits >= 180

    def test_signal_is_found(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(80, 6))
        y = 3 * x[:, 2] + rng.normal(size=80)
        prob = PenalizedProblem(x, y)
        cv = cross_validate(prob, seed=1)
        assert lasso_cd(prob, cv.lambda_1se).coefficients[2] > 1.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_1se_not_below_min(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, 5))
        y = x @ rng.normal(size=5) * rng.integers(0, 2) + rng.normal(size=30)
        cv = cross_validate(PenalizedProblem(x, y), k=5, seed=seed)
        assert cv.lambda_1se >= cv.lambda_min
        assert cv.lambda_1se in cv.lambda_grid and cv.lambda_min in cv.lambda_grid
        assert cv.index_1se <= cv.index_min

    def test_identical_folds(self):
        rng = np.random.default_rng(14)
        base_x = rng.normal(size=(12, 3))
        base_y = base_x @ np.array([1.0, 0.0, -1.0]) + rng.normal(size=12)
        k = 4
        x = np.tile(base_x, (k, 1))
        y = np.tile(base_y, k)
        folds = np.repeat(np.arange(k), 12)
        cv = cross_validate(PenalizedProblem(x, y), folds=folds)
        assert np.all(cv.cv_se < 1e-10)
        assert cv.lambda_1se == cv.lambda_min

    def test_seeded_reproducible(self):
        rng = np.random.default_rng(15)
        prob = PenalizedProblem(rng.normal(size=(40, 4)), rng.normal(size=40))
        a = cross_validate(prob, seed=3)
        b = cross_validate(prob, seed=3)
        assert np.array_equal(a.cv_mse, b.cv_mse) and np.array_equal(a.folds, b.folds)

    def test_weight_fn_receives_training_mask(self):
        rng = np.random.default_rng(16)
        prob = PenalizedProblem(rng.normal(size=(40, 3)), rng.normal(size=40))
        sizes = []

        def wf(rows):
            sizes.append(int(rows.sum()))
            return np.ones(3)

        plain = cross_validate(prob, k=4, seed=0)
        via = cross_validate(prob, k=4, seed=0, weight_fn=wf)
        assert sizes == [30] * 4
        assert np.allclose(plain.cv_mse, via.cv_mse)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            cross_validate(PenalizedProblem(np.ones((5, 1)), np.arange(5.0)), k=10)

    def test_fold_moment_downdate_matches_refit(self):
        # held-out error from the moment downdate equals a direct refit on the training rows
        rng = np.random.default_rng(17)
        x = rng.normal(size=(30, 4))
        y = x[:, 0] + rng.normal(size=30)
        prob = PenalizedProblem(x, y, intercept=True)
        folds = make_folds(30, 3, seed=2)
        lambdas = lambda_grid(prob)[::25]
        cv = cross_validate(prob, folds=folds, lambdas=lambdas)
        ref = np.zeros((3, lambdas.size))
        for f in range(3):
            tr = folds != f
            for i, lam in enumerate(lambdas):
                fit = lasso_cd(prob.subset(tr), lam)
                pred = x[~tr] @ fit.coefficients + fit.intercept_value
                ref[f, i] = np.mean((y[~tr] - pred) ** 2)
        assert np.allclose(cv.cv_mse, ref.mean(axis=0), rtol=1e-6)


def test_make_folds_balanced():
    f = make_folds(23, 5, seed=0)
    counts = np.bincount(f)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 23
