import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratcox.cox import build_stratum_index, fit_newton, partial_loglik
from stratcox.errors import TooFewEvents
from stratcox.penalized import (
    WEIGHT_CAP,
    LambdaPath,
    PenaltySpec,
    adaptive_weights,
    assign_folds,
    compute_lambda_max,
    cross_validate_lambda,
    fit_coordinate_descent,
    fit_penalized,
    kkt_violation,
    n_screened,
    screen_top_features,
    solve_path,
    standardize_within_strata,
)

from conftest import make_dataset, random_dataset


def objective(index, X, beta, lam, pf=None):
    pf = np.ones(X.shape[1]) if pf is None else pf
    return partial_loglik(index, X, beta) - index.n * lam * np.sum(pf * np.abs(beta))


def dense(coefs, p):
    out = np.zeros(p)
    for f, b in coefs.entries:
        out[int(f)] = b
    return out


class TestScreening:
    @pytest.mark.parametrize("n0, k", [(74, 18), (72, 18), (70, 18), (66, 16), (4, 1), (10, 2), (14, 4)])
    def test_nearest_integer_half_even(self, n0, k):
        assert n_screened(n0) == k

    def test_too_few_events(self, rng):
        ds = make_dataset(rng.normal(size=(6, 2)), [1, 2, 3, 4, 5, 6], [1, 1, 1, 0, 0, 0], [0] * 6)
        with pytest.raises(TooFewEvents):
            screen_top_features(ds, "batch")

    def test_identical_columns_keep_index_order(self, rng):
        col = rng.normal(size=40)
        ds = make_dataset(np.column_stack([col] * 6), rng.uniform(1, 9, 40), [1] * 40, [0] * 40)
        k = min(6, n_screened(40))
        assert screen_top_features(ds, "batch") == [f"g{j}" for j in range(k)]

    def test_predictive_feature_found(self):
        hits = 0
        for seed in range(40):
            r = np.random.default_rng(seed)
            beta = np.zeros(51)
            beta[7] = 1.0
            ds = random_dataset(r, n=96, p=51, beta=beta, censor=0.23)
            hits += "g7" in screen_top_features(ds, "batch")
        assert hits / 40 > 0.95


class TestStandardize:
    def test_invariant_to_stratum_shifts(self, rng):
        X = rng.normal(size=(30, 3))
        strata = np.arange(30) % 3
        shift = rng.normal(scale=10, size=(3, 3))[strata]
        a, sa = standardize_within_strata(X, strata)
        b, sb = standardize_within_strata(X + shift, strata)
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(sa, sb, rtol=1e-12)


class TestLambdaMax:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_boundary(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, n=30, p=4)
        idx = build_stratum_index(ds, "batch")
        X = ds.expr.values
        lmax = compute_lambda_max(idx, X)
        assert len(fit_coordinate_descent(idx, X, lmax)) == 0
        assert len(fit_coordinate_descent(idx, X, 1.0001 * lmax)) == 0
        assert len(fit_coordinate_descent(idx, X, 0.99 * lmax)) >= 1

    def test_no_signal_floor(self):
        ds = make_dataset(np.full(6, 2.0), [1, 2, 3, 4, 5, 6], [1] * 6, [0] * 6)
        assert compute_lambda_max(build_stratum_index(ds, "batch"), ds.expr.values) == 1e-12

    def test_path_endpoint_exactly_empty(self, rng):
        ds = random_dataset(rng, n=40, p=5)
        idx = build_stratum_index(ds, "batch")
        path = LambdaPath.log_spaced(compute_lambda_max(idx, ds.expr.values))
        assert len(path) == 50 and path.values[-1] == pytest.approx(0.05 * path.values[0])
        betas = solve_path(idx, ds.expr.values, path.values)
        assert np.all(betas[0] == 0.0)

    def test_path_validation(self):
        with pytest.raises(ValueError):
            LambdaPath(np.array([1.0]))
        with pytest.raises(ValueError):
            LambdaPath(np.array([1.0, 2.0]))


class TestCoordinateDescent:
    def test_kkt_along_path(self, rng):
        ds = random_dataset(rng, n=60, p=8, beta=np.r_[1.0, -1.0, np.zeros(6)])
        idx = build_stratum_index(ds, "batch")
        X = ds.expr.values
        path = LambdaPath.log_spaced(compute_lambda_max(idx, X))
        for lam, b in zip(path.values, solve_path(idx, X, path.values)):
            assert kkt_violation(idx, X, b, lam) <= 1e-4

    def test_adaptive_kkt(self, rng):
        ds = random_dataset(rng, n=60, p=6, beta=np.r_[1.0, np.zeros(5)])
        idx = build_stratum_index(ds, "batch")
        X = ds.expr.values
        pen = PenaltySpec("adaptive_lasso", rng.uniform(0.5, 4, 6))
        lam = 0.3 * compute_lambda_max(idx, X, pen)
        b = dense(fit_coordinate_descent(idx, X, lam, pen), 6)
        assert kkt_violation(idx, X, b, lam, pen) <= 1e-4

    def test_tiny_lambda_matches_newton(self, rng):
        ds = random_dataset(rng, n=80, p=3, n_batches=1, beta=np.array([0.8, -0.5, 0.2]))
        idx = build_stratum_index(ds, "none")
        X = ds.expr.values
        cd = dense(fit_coordinate_descent(idx, X, 1e-10), 3)
        nt = fit_newton(idx, X).coefficients
        np.testing.assert_allclose(cd, nt, atol=1e-3)

    def test_local_optimality_probe(self):
        rng = np.random.default_rng(11)
        ds = random_dataset(rng, n=20, p=3, beta=np.array([1.0, 0.0, -0.5]))
        idx = build_stratum_index(ds, "batch")
        X = ds.expr.values
        lam = 0.3 * compute_lambda_max(idx, X)
        b = dense(fit_coordinate_descent(idx, X, lam), 3)
        best = objective(idx, X, b, lam)
        eps = rng.normal(size=(1000, 3))
        eps *= 1e-3 / np.linalg.norm(eps, axis=1, keepdims=True)
        assert all(objective(idx, X, b + e, lam) <= best + 1e-12 for e in eps)

    def test_nonzero_count_monotone(self, rng):
        ds = random_dataset(rng, n=80, p=10, beta=np.r_[np.linspace(1, 0.1, 5), np.zeros(5)])
        idx = build_stratum_index(ds, "batch")
        X, _ = standardize_within_strata(ds.expr.values, ds.batch)
        path = LambdaPath.log_spaced(compute_lambda_max(idx, X), 50, 0.01)
        nnz = (solve_path(idx, X, path.values) != 0).sum(axis=1)
        drops = np.sum(np.diff(nnz) < 0)
        assert nnz[0] == 0 and drops <= 1
        assert np.all(np.diff(nnz) >= -1)

    def test_batch_shift_invariance(self, rng):
        ds = random_dataset(rng, n=60, p=5, beta=np.r_[1.0, -0.5, np.zeros(3)])
        shift = rng.normal(scale=5, size=(3, 5))[np.arange(60) % 3]
        sh = ds.with_expr(ds.expr.with_values(ds.expr.values + shift))
        X1, _ = standardize_within_strata(ds.expr.values, ds.batch)
        X2, _ = standardize_within_strata(sh.expr.values, sh.batch)
        i1, i2 = build_stratum_index(ds, "batch"), build_stratum_index(sh, "batch")
        lams = LambdaPath.log_spaced(compute_lambda_max(i1, X1)).values
        np.testing.assert_allclose(solve_path(i2, X2, lams), solve_path(i1, X1, lams), atol=1e-6)

    def test_raw_shift_invariance(self, rng):
        # unstandardized design: raw columns plus per-batch constants
        ds = random_dataset(rng, n=60, p=4, beta=np.r_[1.0, np.zeros(3)])
        shift = rng.normal(scale=5, size=(3, 4))[np.arange(60) % 3]
        idx = build_stratum_index(ds, "batch")
        lam = 0.2 * compute_lambda_max(idx, ds.expr.values)
        a = dense(fit_coordinate_descent(idx, ds.expr.values, lam), 4)
        b = dense(fit_coordinate_descent(idx, ds.expr.values + shift, lam), 4)
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestAdaptiveWeights:
    def test_definition_and_cap(self):
        x = np.linspace(-1, 1, 40)
        ds = make_dataset(np.column_stack([x, np.ones(40)]), np.arange(1, 41), [1] * 40, [0] * 40)
        w = adaptive_weights(ds, ["g0", "g1"], "batch")
        assert w[1] == WEIGHT_CAP == 1e6
        from stratcox.cox import fit_univariate

        b = fit_univariate(build_stratum_index(ds, "batch"), ds.expr.values[:, [0]]).beta[0]
        assert w[0] == pytest.approx(1 / abs(b))

    def test_half_gives_two(self, monkeypatch):
        import stratcox.penalized as pz

        class Fake:
            beta = np.array([0.5, -0.5, 2.0])

        monkeypatch.setattr(pz, "fit_univariate", lambda *a, **k: Fake())
        ds = make_dataset(np.zeros((4, 3)), [1, 2, 3, 4], [1] * 4, [0] * 4)
        w = pz.adaptive_weights(ds, ["g0", "g1", "g2"], "batch", X=np.zeros((4, 3)))
        np.testing.assert_allclose(w, [2.0, 2.0, 0.5])
        assert w[2] / w[0] == pytest.approx(1 / 4)


class TestCrossValidation:
    def test_folds_whole_strata(self, rng):
        strata = np.repeat(np.arange(12), 5)
        folds = assign_folds(strata, np.ones(60, int), 5, rng)
        for s in range(12):
            assert len(set(folds[strata == s])) == 1

    def test_folds_within_strata(self, rng):
        strata = np.repeat(np.arange(3), 20)
        folds = assign_folds(strata, np.ones(60, int), 5, rng)
        for s in range(3):
            assert set(folds[strata == s]) == set(range(5))

    def test_leave_one_stratum_out(self, rng):
        ds = random_dataset(rng, n=40, p=4, n_batches=4, beta=np.r_[1.0, np.zeros(3)])
        cv = cross_validate_lambda(ds, ds.expr.feature_ids, K=4, rng=rng, unit="strata")
        assert cv.lam in cv.path.values
        assert len(set(cv.folds)) == 4

    def test_deterministic_given_seed(self, rng):
        ds = random_dataset(rng, n=60, p=5, beta=np.r_[1.0, np.zeros(4)])
        a = cross_validate_lambda(ds, ds.expr.feature_ids, rng=np.random.default_rng(5))
        b = cross_validate_lambda(ds, ds.expr.feature_ids, rng=np.random.default_rng(5))
        assert a.lam == b.lam
        np.testing.assert_array_equal(a.criterion, b.criterion)

    def test_null_data_selects_little(self):
        sparse = 0
        for seed in range(40):
            r = np.random.default_rng(seed)
            ds = random_dataset(r, n=96, p=10, censor=0.23)
            X, _ = standardize_within_strata(ds.expr.values, ds.batch)
            cv = cross_validate_lambda(ds, ds.expr.feature_ids, rng=r, X=X)
            beta = solve_path(build_stratum_index(ds, "batch"), X, cv.path.values)[cv.index]
            sparse += np.count_nonzero(beta) <= 2
        assert sparse / 40 > 0.8

    def test_strong_signal_selected(self):
        hits = 0
        for seed in range(25):
            r = np.random.default_rng(seed)
            beta = np.zeros(40)
            beta[3] = 1.5
            ds = random_dataset(r, n=96, p=40, beta=beta, censor=0.23)
            hits += "g3" in fit_penalized(ds, "batch", rng=r).coefficients.features
        assert hits / 25 > 0.95


class TestFitPenalized:
    def test_model_record(self, rng):
        ds = random_dataset(rng, n=96, p=30, beta=np.r_[1.0, -1.0, np.zeros(28)])
        m = fit_penalized(ds, "batch", "adaptive_lasso", rng, seed=3)
        assert m.method == "batman_alasso" and m.stratum_level == "batch" and m.seed == 3
        assert m.tuning["lambda_min"] <= m.tuning["lambda"] <= m.tuning["lambda_max"]
        assert m.training_summary["n_screened"] == n_screened(ds.n_events)

    def test_unstratified_name(self, rng):
        ds = random_dataset(rng, n=60, p=10, beta=np.r_[1.0, np.zeros(9)])
        assert fit_penalized(ds, "none", rng=rng).method == "cox_lasso"
