import numpy as np
import pytest
from scipy.stats import spearmanr

from stratcox.core import ExpressionMatrix, SparseCoefficients, SurvivalRecord, risk_score
from stratcox.errors import OracleUndefined, ValidationError
from stratcox.io import table_csv
from stratcox.simulation import (
    SCENARIOS,
    SUMMARY_COLUMNS,
    Arm,
    ArrayLayout,
    ScenarioResults,
    ScenarioSpec,
    SimulationConfig,
    RunOutcome,
    gen_handling_effects,
    gen_virtual_samples,
    make_profile,
    make_signal,
    oracle_fit,
    run_scenario,
    simulate_outcomes,
    study,
    assign_to_arrays,
)

FIDS = tuple(f"f{j:03d}" for j in range(300))


def block_corr(X, block_size):
    C = np.corrcoef(X.T)
    blocks = np.arange(X.shape[1]) // block_size
    same = (blocks[:, None] == blocks[None, :]) & ~np.eye(len(blocks), dtype=bool)
    diff = blocks[:, None] != blocks[None, :]
    return C[same].mean(), np.abs(C[diff]).mean()


class TestConfig:
    def test_defaults(self):
        c = SimulationConfig()
        assert (c.n, c.n_features, c.block_size, c.rho, c.mean_range) == (96, 300, 10, 0.5, (6.0, 12.0))
        assert c.magnitude == 1.0 and c.censoring == 0.23

    @pytest.mark.parametrize("kw", [{"rho": 1.5}, {"n": 1}, {"magnitude": -1}, {"censoring": 1.2}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            SimulationConfig(**kw)


class TestVirtualSamples:
    def test_block_correlation(self):
        within = []
        for seed in range(5):
            X = gen_virtual_samples(SimulationConfig(), np.random.default_rng(seed)).values
            w, between = block_corr(X, 10)
            within.append(w)
            assert between < 0.15
        assert 0.35 <= np.mean(within) <= 0.65

    def test_independent_when_rho_zero(self):
        X = gen_virtual_samples(SimulationConfig(rho=0.0), np.random.default_rng(1)).values
        w, between = block_corr(X, 10)
        assert abs(w) < 0.15 and between < 0.15

    def test_determinism(self):
        a = gen_virtual_samples(SimulationConfig(), np.random.default_rng(42))
        b = gen_virtual_samples(SimulationConfig(), np.random.default_rng(42))
        assert a.values.tobytes() == b.values.tobytes()

    def test_means_in_range(self):
        prof = make_profile(SimulationConfig(), np.random.default_rng(0))
        assert prof.means.min() >= 6 and prof.means.max() <= 12
        assert prof.template[1].sum() == 96 - round(0.23 * 96)


class TestLayout:
    def test_regular(self):
        lay = ArrayLayout.regular(96, 4)
        assert lay.n_arrays == 96 and len(lay.slides) == 12 and len(lay.batches) == 3
        sizes = np.bincount(lay.batch_index())
        assert np.all(sizes == 32)

    def test_slide_size_enforced(self):
        with pytest.raises(ValidationError):
            ArrayLayout(("s1",) * 7 + ("s2",) * 9, ("b1",) * 16)

    def test_batch_size_enforced(self):
        with pytest.raises(ValidationError):
            ArrayLayout.regular(48, 3)


class TestHandlingEffects:
    lay = ArrayLayout.regular(96, 4)

    def test_zero_magnitude(self):
        he = gen_handling_effects(self.lay, 0.0, np.random.default_rng(0), n_features=50)
        assert np.all(he.total == 0)

    def test_same_slide_differs_by_noise(self):
        he = gen_handling_effects(self.lay, 1.0, np.random.default_rng(0), n_features=50)
        W = he.total
        np.testing.assert_allclose(W[0] - W[1], he.noise[0] - he.noise[1], atol=1e-12)
        np.testing.assert_array_equal(he.batch[0], he.batch[31])
        assert not np.allclose(he.batch[0], he.batch[32])

    def test_component_scales(self):
        he = gen_handling_effects(self.lay, 2.0, np.random.default_rng(3), n_features=2000)
        assert he.slide[::8].std() == pytest.approx(1.0, rel=0.1)
        assert he.noise.std() == pytest.approx(0.5, rel=0.05)

    def test_gap_linear_in_magnitude(self):
        mags = np.array([0.5, 1.0, 2.0, 4.0])
        gaps = []
        for m in mags:
            vals = []
            for seed in range(30):
                W = gen_handling_effects(self.lay, m, np.random.default_rng(seed), n_features=100).total
                b = self.lay.batch_index()
                vals.append(np.abs(W[b == 0].mean(axis=0) - W[b == 2].mean(axis=0)).mean())
            gaps.append(np.mean(vals))
        slope, icpt = np.polyfit(mags, gaps, 1)
        assert abs(icpt) < 0.02 * slope
        np.testing.assert_allclose(gaps, slope * mags, rtol=0.02)

    def test_severity_drift_ordered(self):
        # with a fully rank-one batch component, batch shifts follow the batch order
        ell = np.ones(20)
        he = gen_handling_effects(self.lay, 1.0, np.random.default_rng(0), loading=ell, severity_weight=1.0)
        per_batch = he.batch[[0, 32, 64]].mean(axis=1)
        assert per_batch[0] < per_batch[1] < per_batch[2]


class TestSignal:
    def test_weak(self):
        s = make_signal("weak", FIDS, np.random.default_rng(0))
        assert len(s.coefficients) == 30 and np.all(s.coefficients.values == 0.35)
        assert s.coefficients.l1_norm() == pytest.approx(10.5)

    def test_moderate(self):
        for seed in range(10):
            s = make_signal("moderate", FIDS, np.random.default_rng(seed))
            assert len(s.coefficients) == 6
            assert s.coefficients.l1_norm() == pytest.approx(10.5)
            assert np.all(s.coefficients.values > 0)

    def test_null_scores_zero(self):
        s = make_signal("null", FIDS, np.random.default_rng(0))
        X = ExpressionMatrix(np.ones((3, 300)), ("a", "b", "c"), FIDS)
        np.testing.assert_array_equal(risk_score(s.coefficients, X), 0.0)

    def test_candidates_respected(self):
        s = make_signal("moderate", FIDS, np.random.default_rng(0), candidates=FIDS[:10])
        assert set(s.coefficients.features) <= set(FIDS[:10])

    def test_fixed_per_study_seed(self):
        assert study(SimulationConfig(), "moderate", 5)[1] == study(SimulationConfig(), "moderate", 5)[1]


def _X(n, rng, G=3):
    return ExpressionMatrix(rng.normal(size=(n, G)), [f"v{i}" for i in range(n)], [f"f{j}" for j in range(G)])


class TestOutcomes:
    def test_multiset_preserved(self, rng):
        X = _X(20, rng)
        times = rng.exponential(10, 20) + 0.5
        events = (rng.random(20) < 0.7).astype(int)
        beta = SparseCoefficients((("f0", 1.0),))
        for seed in range(50):
            out = simulate_outcomes(X, beta, (times, events), np.random.default_rng(seed))
            got = sorted((r.time, r.event) for r in out)
            assert got == sorted(zip(times.tolist(), events.tolist()))

    def test_dominant_sample_fails_first(self):
        X = ExpressionMatrix(np.r_[[10.0], np.zeros(9)][:, None], [f"v{i}" for i in range(10)], ["f0"])
        beta = SparseCoefficients((("f0", 1.0),))
        times, events = np.arange(1.0, 11.0), np.ones(10, int)
        hits = sum(
            simulate_outcomes(X, beta, (times, events), np.random.default_rng(s))[0].time == 1.0
            for s in range(500)
        )
        assert hits / 500 > 0.99

    def test_template_records(self, rng):
        X = _X(4, rng)
        recs = [SurvivalRecord(t, 1) for t in (4.0, 1.0, 3.0, 2.0)]
        out = simulate_outcomes(X, SparseCoefficients(), recs, rng)
        assert sorted(r.time for r in out) == [1.0, 2.0, 3.0, 4.0]

    def test_length_mismatch(self, rng):
        with pytest.raises(ValidationError):
            simulate_outcomes(_X(4, rng), SparseCoefficients(), ([1.0], [1]), rng)


class TestAssignment:
    lay = ArrayLayout.regular(32, 4)

    def _data(self, rng):
        X = _X(32, rng)
        surv = [SurvivalRecord(float(t), 1) for t in rng.permutation(32) + 1]
        return X, surv

    def test_random_zero_effects(self, rng):
        X, surv = self._data(rng)
        ds = assign_to_arrays(X, surv, None, self.lay, "random", rng)
        rows = [X.sample_ids.index(s) for s in ds.sample_ids]
        np.testing.assert_array_equal(ds.expr.values, X.values[rows])
        assert list(ds.batch) == list(self.lay.batch_of)
        t = {s: r.time for s, r in zip(X.sample_ids, surv)}
        assert [t[s] for s in ds.sample_ids] == ds.time.tolist()

    def test_sorted_modes(self, rng):
        lay = ArrayLayout.regular(96, 4)
        X = _X(96, rng)
        surv = [SurvivalRecord(float(t), 1) for t in rng.integers(1, 30, 96)]
        pos = assign_to_arrays(X, surv, None, lay, "sorted_pos", np.random.default_rng(1))
        neg = assign_to_arrays(X, surv, None, lay, "sorted_neg", np.random.default_rng(1))
        idx = lay.batch_index()
        best = spearmanr(np.sort(pos.time), idx)[0]
        assert spearmanr(pos.time, idx)[0] == pytest.approx(best)
        assert spearmanr(neg.time, idx)[0] == pytest.approx(-best)
        assert np.all(np.diff(pos.time) >= 0)

    def test_effects_added(self, rng):
        X, surv = self._data(rng)
        W = rng.normal(size=(32, 3))
        ds = assign_to_arrays(X, surv, W, self.lay, "random", np.random.default_rng(0))
        plain = assign_to_arrays(X, surv, None, self.lay, "random", np.random.default_rng(0))
        np.testing.assert_allclose(ds.expr.values - plain.expr.values, W)

    def test_count_mismatch(self, rng):
        X, surv = self._data(rng)
        with pytest.raises(ValidationError):
            assign_to_arrays(X, surv[:-1], None, self.lay, "random", rng)


class TestScenarios:
    def test_table(self):
        assert SCENARIOS == ("BE00Cor00", "BE10Cor00", "BE10Cor10", "BE11Cor00",
                             "BE11Cor10", "BE11Cor01", "BE11Cor11", "BE11Cor1-1")
        sc = ScenarioSpec.from_name("BE11Cor1-1")
        assert sc.train_mode == "sorted_pos" and sc.test_mode == "sorted_neg"

    def test_only_table_combinations(self):
        with pytest.raises(ValidationError):
            ScenarioSpec("BE01Cor00", False, True, "none", "none")
        with pytest.raises(ValidationError):
            ScenarioSpec.from_name("BE01Cor00")

    def test_arm_parse(self):
        assert Arm.parse("median+batman_slide") == Arm("median+batman_slide", "median", "batman_slide")
        assert Arm.parse("quantile").core == "none" and Arm.parse("batman_batch").level == "batch"
        with pytest.raises(ValidationError):
            Arm.parse("combat+median")

    def test_flags_zero_effects(self):
        from stratcox.simulation import RunTask, run_seeds, simulate_run_data

        cfg = SimulationConfig()
        prof, sig = study(cfg, "moderate", 3)
        seed = run_seeds(3, 1)[0]
        task = RunTask(ScenarioSpec.from_name("BE10Cor00"), sig, prof, cfg, (), (), 0, seed)
        train, test, _ = simulate_run_data(task)
        X = gen_virtual_samples(cfg, np.random.default_rng(seed), prof).values
        # the test set is pure biology, permuted
        assert sorted(map(tuple, test.expr.values.round(12))) == sorted(map(tuple, X.round(12)))
        assert sorted(map(tuple, train.expr.values.round(12))) != sorted(map(tuple, X.round(12)))


class TestOracle:
    def _ds(self, kind):
        from stratcox.simulation import RunTask, run_seeds, simulate_run_data

        cfg = SimulationConfig()
        prof, sig = study(cfg, kind, 1)
        task = RunTask(ScenarioSpec.from_name("BE00Cor00"), sig, prof, cfg, (), (), 0, run_seeds(1, 1)[0])
        return simulate_run_data(task)[0], sig

    @pytest.mark.parametrize("kind, k", [("moderate", 6), ("weak", 30)])
    def test_feature_counts(self, kind, k):
        ds, sig = self._ds(kind)
        model = oracle_fit(ds, sig, "slide")
        assert len(model.coefficients) == k and model.method == "batman_oracle"

    def test_null_undefined(self):
        ds, sig = self._ds("null")
        with pytest.raises(OracleUndefined):
            oracle_fit(ds, sig, "batch")
        with pytest.raises(OracleUndefined):
            run_scenario("BE00Cor00", "null", ["batman_batch"], ["oracle"], n_runs=1)


class TestRunScenario:
    def test_single_run_deterministic(self):
        kw = dict(adjustments=["batman_slide", "combat_batch", "quantile"], model_methods=["oracle", "lasso"],
                  n_runs=1, seed=9)
        a = run_scenario("BE11Cor10", "moderate", **kw)
        b = run_scenario("BE11Cor10", "moderate", **kw)
        cols = list(SUMMARY_COLUMNS)
        assert a.rows() == b.rows()
        assert table_csv(cols, [[r[c] for c in cols] for r in a.summary()]) == \
            table_csv(cols, [[r[c] for c in cols] for r in b.summary()])
        assert len(a.rows()) == 6

    def test_cells_independent_of_arm_list(self):
        a = run_scenario("BE11Cor00", "moderate", ["batman_slide"], ["lasso"], n_runs=1, seed=4)
        b = run_scenario("BE11Cor00", "moderate", ["combat_batch", "batman_slide"], ["lasso"], n_runs=1, seed=4)
        assert a.values("batman_slide", "lasso")[0] == b.values("batman_slide", "lasso")[0]

    def test_batman_batch_offset_invariance(self):
        # offsets average to zero over the equal-size batches, so column means
        # (and with them the abundance prefilter) are unchanged
        kw = dict(adjustments=["batman_slide", "batman_batch"], model_methods=["oracle", "lasso"], n_runs=2, seed=6)
        a = run_scenario("BE11Cor00", "moderate", **kw)
        b = run_scenario("BE11Cor00", "moderate", train_batch_offset=[2.0, -3.0, 1.0], **kw)
        for arm in ("batman_slide", "batman_batch"):
            for m in ("oracle", "lasso"):
                np.testing.assert_allclose(b.values(arm, m), a.values(arm, m), atol=1e-9)

    def test_summary_statistics(self):
        runs = [RunOutcome(r, {("a", "m"): c}) for r, c in enumerate([0.5, 0.6, 0.7])]
        runs.append(RunOutcome(3, {}, {("a", "m"): "NoEvents: x"}))
        res = ScenarioResults("BE00Cor00", "moderate", ("a",), ("m",), runs)
        row = res.summary()[0]
        assert row["mean"] == pytest.approx(0.6) and row["sd"] == pytest.approx(0.1)
        assert row["n_failed"] == 1 and row["flagged"] == 1
        assert row["p2.5"] == pytest.approx(np.percentile([0.5, 0.6, 0.7], 2.5))
        assert res.failures() == [("BE00Cor00", "moderate", "a", "m", 3, "NoEvents: x")]

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            run_scenario("BE00Cor00", "moderate", ["batman_batch"], ["ridge"], n_runs=1)

    def test_parallel_matches_serial(self):
        kw = dict(adjustments=["batman_batch"], model_methods=["lasso"], n_runs=2, seed=2)
        assert run_scenario("BE11Cor11", "weak", jobs=2, **kw).rows() == run_scenario("BE11Cor11", "weak", **kw).rows()
