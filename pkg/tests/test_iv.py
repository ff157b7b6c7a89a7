import warnings

import numpy as np
import pytest

from screensim.config import build_population, default_config, validate_config
from screensim.iv import (
    DegenerateInstrumentError,
    balance_check,
    build_instrument,
    complier_outcomes,
    monotonicity_suite,
    ols_on_scalar,
    two_stage_least_squares,
)


class TestBuildInstrument:
    def test_leave_out_means_hand_case(self):
        sid = np.array([0, 0, 0, 1, 1, 1])
        dec = np.array([1, 0, 1, 0, 1, 0])
        inst = build_instrument(sid, dec, min_caseload=2)
        assert np.allclose(inst.raw[:3], [0.5, 1.0, 0.5])
        assert np.allclose(inst.raw[3:], [0.5, 0.0, 0.5])
        kept = inst.values[inst.retained]
        assert kept.mean() == pytest.approx(0.0, abs=1e-12)
        assert kept.std() == pytest.approx(1.0, abs=1e-12)

    def test_small_screeners_dropped(self):
        sid = np.array([0] * 60 + [1] * 60 + [2] * 5)
        dec = (np.arange(125) % 3 == 0).astype(int)
        inst = build_instrument(sid, dec, min_caseload=50)
        assert inst.excluded_screeners == [2]
        assert not inst.retained[120:].any()
        assert inst.retained[:120].all()

    def test_degenerate_instrument_raises(self):
        sid = np.array([0] * 60 + [1] * 60)
        dec = np.zeros(120, dtype=int)
        with pytest.raises(DegenerateInstrumentError):
            build_instrument(sid, dec, min_caseload=50)

    def test_too_few_screeners_raises(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            build_instrument(np.zeros(100, dtype=int), np.ones(100), min_caseload=50)

    def test_jackknife_locality(self):
        rng = np.random.default_rng(0)
        sid = rng.integers(0, 4, 400)
        dec = rng.integers(0, 2, 400).astype(float)
        base = build_instrument(sid, dec, min_caseload=10)
        bumped = dec.copy()
        bumped[sid == 2] += 1.0
        alt = build_instrument(sid, bumped, min_caseload=10)
        other = sid != 2
        assert np.allclose(base.raw[other], alt.raw[other])
        assert not np.allclose(base.raw[sid == 2], alt.raw[sid == 2])

    def test_strong_first_stage_with_leniency(self):
        cfg = default_config()
        cfg["population"]["n"] = 20000
        cfg = validate_config(cfg)
        pop, _ = build_population(cfg, seed=1)
        inst = build_instrument(pop.screener_id, pop.interviewed)
        keep = inst.retained
        res = ols_on_scalar(pop.interviewed[keep].astype(float), inst.values[keep],
                            cluster=pop.screener_id[keep])
        assert res.coefficient > 0
        assert abs(res.t) > 4


class TestBalanceCheck:
    def test_randomized_assignment_is_balanced(self):
        # pooled over seeds: few-cluster t statistics have mildly fat tails
        ok = total = 0
        for seed in (2, 3, 4):
            cfg = default_config()
            cfg["population"]["n"] = 20000
            cfg["screening"]["screeners"] = 80
            cfg = validate_config(cfg)
            pop, _ = build_population(cfg, seed=seed)
            inst = build_instrument(pop.screener_id, pop.interviewed)
            df = balance_check(inst, pop.features, names=pop.feature_names,
                               cluster=pop.screener_id)
            ok += int((df["t"].abs() < 2).sum())
            total += len(df)
        assert ok / total >= 0.9

    def test_zero_covariate_gives_exact_zero(self):
        rng = np.random.default_rng(3)
        sid = rng.integers(0, 5, 500)
        dec = rng.integers(0, 2, 500)
        inst = build_instrument(sid, dec, min_caseload=10)
        df = balance_check(inst, np.zeros((500, 1)), names=["z0"], cluster=sid)
        assert df.loc[0, "coefficient"] == 0.0

    def test_row_shuffle_within_screener_is_invariant(self):
        rng = np.random.default_rng(4)
        sid = rng.integers(0, 5, 600)
        dec = rng.integers(0, 2, 600)
        X = rng.standard_normal((600, 3))
        inst = build_instrument(sid, dec, min_caseload=10)
        df = balance_check(inst, X, cluster=sid)
        perm = np.concatenate([rng.permutation(np.flatnonzero(sid == k))
                               for k in range(5)])
        inst2 = build_instrument(sid[perm], dec[perm], min_caseload=10)
        df2 = balance_check(inst2, X[perm], cluster=sid[perm])
        assert np.allclose(df["coefficient"], df2["coefficient"], atol=1e-12)
        assert np.allclose(df["se"], df2["se"], atol=1e-12)


class TestTwoStageLeastSquares:
    def test_z_equals_x_reproduces_ols(self):
        rng = np.random.default_rng(5)
        n = 300
        x = rng.standard_normal(n)
        controls = [rng.integers(0, 3, n)]
        y = 1.5 * x + rng.standard_normal(n)
        iv = two_stage_least_squares(y, x, x, controls=controls)
        ols = ols_on_scalar(y, x, controls=controls)
        assert abs(iv.coefficient - ols.coefficient) < 1e-10

    def test_closed_form_scalar_case(self):
        z = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([2.0, 4.0, 6.0, 8.0])
        res = two_stage_least_squares(y, z.copy(), z)
        assert res.coefficient == pytest.approx(2.0, abs=1e-12)

    def test_null_effect_within_three_ses(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n = 2000
            cluster = rng.integers(0, 25, n)
            z = rng.standard_normal(25)[cluster] + 0.3 * rng.standard_normal(n)
            x = 0.9 * z + rng.standard_normal(n)
            y = rng.standard_normal(n)
            res = two_stage_least_squares(y, x, z, cluster=cluster)
            hits += abs(res.coefficient) < 3 * res.se
        assert hits >= 9

    def test_weak_instrument_warns(self):
        rng = np.random.default_rng(6)
        n = 400
        x = rng.standard_normal(n)
        z = rng.standard_normal(n)  # irrelevant instrument
        y = x + rng.standard_normal(n)
        with pytest.warns(RuntimeWarning, match="weak instrument"):
            res = two_stage_least_squares(y, x, z)
        assert res.weak_instrument

    def test_no_residual_instrument_variance_errors(self):
        z = np.ones(50)
        with pytest.raises(ValueError, match="no residual variance"):
            two_stage_least_squares(np.zeros(50), np.arange(50.0), z)

    def test_clustered_ses_exceed_robust_under_cluster_shocks(self):
        rng = np.random.default_rng(7)
        n, g = 2000, 20
        cluster = np.repeat(np.arange(g), n // g)
        z = rng.standard_normal(g)[cluster]
        x = z + 0.2 * rng.standard_normal(n)
        shocks = 2.0 * rng.standard_normal(g)
        y = 0.5 * x + shocks[cluster] + 0.2 * rng.standard_normal(n)
        clustered = two_stage_least_squares(y, x, z, cluster=cluster)
        robust = two_stage_least_squares(y, x, z, cluster=None)
        assert clustered.se > robust.se


class TestComplierOutcomes:
    def _screened(self, seed, n=20000):
        cfg = default_config()
        cfg["population"]["n"] = n
        cfg = validate_config(cfg)
        return build_population(cfg, seed=seed)[0]

    def test_unit_outcome_gives_unit_complier_means(self):
        pop = self._screened(8)
        inst = build_instrument(pop.screener_id, pop.interviewed)
        rng = np.random.default_rng(8)
        scores = rng.random(pop.n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = complier_outcomes(np.ones(pop.n), pop.interviewed, inst, scores,
                                    cluster=pop.screener_id)
        assert out["high"].coefficient == pytest.approx(1.0, abs=1e-8)
        assert out["low"].coefficient == pytest.approx(1.0, abs=1e-8)

    def test_noise_scores_indistinguishable(self):
        hits = 0
        for seed in range(10):
            pop = self._screened(seed + 100, n=12000)
            inst = build_instrument(pop.screener_id, pop.interviewed)
            scores = np.random.default_rng(seed).random(pop.n)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out = complier_outcomes(pop.potential_outcome, pop.interviewed, inst,
                                        scores, cluster=pop.screener_id)
            gap = out["high"].coefficient - out["low"].coefficient
            se = np.hypot(out["high"].se, out["low"].se)
            hits += abs(gap) < 3 * se
        assert hits >= 8

    def test_empty_half_errors(self):
        pop = self._screened(9, n=6000)
        inst = build_instrument(pop.screener_id, pop.interviewed)
        scores = np.full(pop.n, 0.5)
        with pytest.raises(ValueError, match="low-score half"):
            complier_outcomes(pop.potential_outcome, pop.interviewed, inst, scores,
                              threshold=0.1, cluster=pop.screener_id)

    def test_demographic_outcome_override(self):
        pop = self._screened(10, n=12000)
        inst = build_instrument(pop.screener_id, pop.interviewed)
        scores = np.random.default_rng(10).random(pop.n)
        minority = np.isin(pop.group, ["B", "C"]).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = complier_outcomes(pop.potential_outcome, pop.interviewed, inst, scores,
                                    cluster=pop.screener_id,
                                    outcome_override=minority * pop.interviewed)
        for side in ("high", "low"):
            assert np.isfinite(out[side].coefficient)


class TestMonotonicitySuite:
    def test_clean_generator_passes_diagnostics(self):
        cfg = default_config()
        cfg["population"]["n"] = 40000
        cfg["screening"]["screeners"] = 80
        cfg = validate_config(cfg)
        pop, _ = build_population(cfg, seed=11)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = monotonicity_suite(pop, seed=11)
        fs = rep.first_stage.set_index("subgroup")["coefficient"]
        assert (fs > 0).all()
        corr = rep.propensity_correlation.set_index("subgroup")["correlation"]
        assert corr["all"] > 0.6
        cal = rep.calibration.set_index("subsample")["gap"]
        assert abs(cal["strict"]) < 0.05

    def test_planted_violation_detected(self):
        cfg = default_config()
        cfg["population"]["n"] = 20000
        cfg["population"]["unobservable_weight"] = 1.2
        cfg["screening"]["lenient_unobservable_weight"] = 0.5
        cfg = validate_config(cfg)
        pop, _ = build_population(cfg, seed=12)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = monotonicity_suite(pop, seed=12)
        cal = rep.calibration.set_index("subsample")["gap"]
        assert cal["strict"] > 0.05
