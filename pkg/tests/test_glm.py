import warnings

import numpy as np
import pytest
from scipy.special import expit, logit

from screensim.glm import (
    BonusParams,
    ExplorationBonus,
    L1LogisticRegression,
    PrecisionState,
    SingleClassError,
    _cv_penalty,
    balanced_subsample,
    build_precision_state,
    exploration_bonus,
    fit_l1_logistic,
    l1_objective,
    logistic_loss_and_grad,
    model_from_keyvalue,
    model_to_keyvalue,
    precision_state_from_keyvalue,
    precision_state_to_keyvalue,
    predict_probability,
    ucb_score,
)


def synthetic(seed, n, theta_star):
    rng = np.random.default_rng(seed)
    d = len(theta_star) - 1
    X = rng.standard_normal((n, d))
    y = (rng.random(n) < expit(theta_star[0] + X @ theta_star[1:])).astype(int)
    return X, y


def newton_irls(X, y, max_iter=100):
    """Unregularized Newton-method (IRLS) logistic fit: the independent oracle."""
    X1 = np.column_stack([np.ones(len(y)), X])
    w = np.zeros(X1.shape[1])
    for _ in range(max_iter):
        p = expit(X1 @ w)
        h = X1.T @ (X1 * (p * (1 - p))[:, None])
        step = np.linalg.solve(h, X1.T @ (y - p))
        w = w + step
        if np.max(np.abs(step)) < 1e-12:
            break
    return w


class TestBalancedSubsample:
    def test_undersamples_majority_to_minority_count(self):
        X = np.zeros((100, 2))
        y = np.array([1] * 10 + [0] * 90)
        Xb, yb, idx = balanced_subsample(X, y, seed=0)
        assert len(yb) == 20 and yb.sum() == 10

    def test_already_balanced_returned_whole(self):
        X = np.arange(20, dtype=float).reshape(10, 2)
        y = np.array([0, 1] * 5)
        Xb, yb, idx = balanced_subsample(X, y, seed=1)
        assert np.array_equal(np.sort(idx), np.arange(10))

    def test_exact_half_share(self):
        y = np.array([1] * 90 + [0] * 910)
        _, yb, _ = balanced_subsample(np.zeros((1000, 1)), y, seed=2)
        assert len(yb) == 180 and yb.mean() == 0.5

    def test_single_class_errors(self):
        with pytest.raises(SingleClassError):
            balanced_subsample(np.zeros((5, 1)), np.ones(5), seed=0)

    def test_deterministic_per_seed(self):
        y = (np.arange(200) % 3 == 0).astype(int)
        _, _, a = balanced_subsample(np.zeros((200, 1)), y, seed=9)
        _, _, b = balanced_subsample(np.zeros((200, 1)), y, seed=9)
        assert np.array_equal(a, b)


class TestLogisticLoss:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        X, y = synthetic(4, 300, np.array([0.2, 1.0, -0.7, 0.4]))
        step = 1e-5
        for _ in range(100):
            theta = rng.standard_normal(4)
            _, grad = logistic_loss_and_grad(theta, X, y)
            num = np.zeros_like(theta)
            for j in range(4):
                e = np.zeros(4)
                e[j] = step
                lp, _ = logistic_loss_and_grad(theta + e, X, y)
                lm, _ = logistic_loss_and_grad(theta - e, X, y)
                num[j] = (lp - lm) / (2 * step)
            rel = np.abs(grad - num) / np.maximum(np.abs(num), 1e-8)
            assert rel.max() < 1e-6


class TestFit:
    def test_huge_penalty_zeroes_slopes(self):
        X, y = synthetic(5, 2000, np.array([0.3, 0.8, -0.8]))
        m = fit_l1_logistic(X, y, penalty_grid=[1e8], seed=1)
        assert np.all(m.coef_ == 0.0)
        # balanced sample has label mean exactly 1/2
        assert abs(m.intercept_ - logit(0.5)) < 1e-4

    def test_recovers_planted_theta_and_matches_newton_oracle(self):
        theta_star = np.array([0.0, 0.8, -0.5, 0.3, 0.0, -1.0])
        X, y = synthetic(0, 5000, theta_star)
        m = fit_l1_logistic(X, y, penalty_grid=[1e-4], seed=1)
        assert np.max(np.abs(m.theta_ - theta_star)) < 0.15
        Xb, yb, _ = balanced_subsample(X, y, seed=1)
        oracle = newton_irls(Xb, yb)
        assert np.max(np.abs(m.theta_ - oracle)) < 0.05

    def test_local_optimality_of_returned_iterate(self):
        X, y = synthetic(6, 800, np.array([0.1, 0.6, -0.4]))
        lam = 0.01
        m = fit_l1_logistic(X, y, penalty_grid=[lam], seed=2)
        Xb, yb, _ = balanced_subsample(X, y, seed=2)
        base = l1_objective(m.theta_, Xb, yb, lam)
        for j in range(len(m.theta_)):
            for sign in (+1, -1):
                bumped = m.theta_.copy()
                bumped[j] += sign * 0.01
                assert base <= l1_objective(bumped, Xb, yb, lam) + 1e-12

    def test_monotone_shrinkage_along_penalty_chain(self):
        X, y = synthetic(7, 4000, np.array([0.0, 1.0, -0.8, 0.5, 0.25]))
        chain = [1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0]
        prev = None
        for lam in chain:
            m = fit_l1_logistic(X, y, penalty_grid=[lam], seed=3)
            cur = np.abs(m.coef_)
            if prev is not None:
                assert np.all(cur <= prev + 1e-6)
            prev = cur

    def test_cross_validation_picks_reasonable_penalty(self):
        X, y = synthetic(8, 3000, np.array([0.0, 1.2, -0.9, 0.0, 0.0, 0.0]))
        m = fit_l1_logistic(X, y, seed=4)  # default 13-point grid
        assert m.penalty_ <= 1.0
        assert m.train_auc_ > 0.6

    def test_cv_refold_exhaustion_raises(self):
        # a lone positive can never appear in every training fold
        X = np.arange(16, dtype=float).reshape(8, 2)
        y = np.array([1, 0, 0, 0, 0, 0, 0, 0])
        with pytest.raises(SingleClassError):
            _cv_penalty(X, y, np.array([0.1, 1.0]), folds=4, seed=0,
                        tol=1e-8, max_iter=200)

    def test_nonconvergence_warns_and_returns_iterate(self):
        X, y = synthetic(9, 500, np.array([0.0, 2.0, -2.0]))
        with pytest.warns(RuntimeWarning):
            m = fit_l1_logistic(X, y, penalty_grid=[1e-4], seed=5, max_iter=3)
        assert not m.converged_
        assert np.all(np.isfinite(m.theta_))

    def test_sklearn_get_params_round_trip(self):
        m = L1LogisticRegression(folds=5, seed=42)
        params = m.get_params()
        assert params["folds"] == 5 and params["seed"] == 42
        m.set_params(seed=7)
        assert m.seed == 7


class TestPredict:
    def _model(self, theta):
        m = L1LogisticRegression(penalty_grid=[0.1])
        m.theta_ = np.asarray(theta, dtype=float)
        m.penalty_ = 0.1
        m.n_features_in_ = len(theta) - 1
        return m

    def test_zero_vector_gives_logistic_intercept(self):
        m = self._model([0.73, 0.5, -0.2])
        assert predict_probability(m, np.zeros(2)) == pytest.approx(expit(0.73), abs=1e-12)

    def test_zero_theta_gives_half(self):
        m = self._model([0.0, 0.0, 0.0])
        assert predict_probability(m, np.array([3.0, -4.0])) == 0.5

    def test_hand_case(self):
        m = self._model([0.5, 1.0, -1.0])
        p = predict_probability(m, np.array([2.0, 1.0]))
        assert p == pytest.approx(expit(1.5), abs=1e-12)
        assert p == pytest.approx(0.8175744761936437, abs=1e-10)

    def test_dimension_mismatch(self):
        m = self._model([0.0, 1.0])
        with pytest.raises(ValueError):
            predict_probability(m, np.zeros(3))


class TestPrecisionState:
    def test_two_row_scatter_formula(self):
        x1 = np.array([1.0, 2.0])
        x2 = np.array([3.0, -1.0])
        st = build_precision_state(np.vstack([x1, x2]), ridge=1e-12)
        expected = 0.5 * np.outer(x1 - x2, x1 - x2) + 1e-12 * np.eye(2)
        assert np.allclose(st.v_matrix, expected, atol=1e-15)

    def test_identical_rows_leave_ridge_identity(self):
        st = build_precision_state(np.ones((5, 3)), ridge=0.25)
        assert np.allclose(st.v_matrix, 0.25 * np.eye(3))

    def test_one_dimensional_case(self):
        st = build_precision_state(np.array([[-1.0], [0.0], [1.0]]), ridge=1e-3)
        assert st.v_matrix[0, 0] == pytest.approx(2.0 + 1e-3, abs=1e-12)
        assert st.x_bar[0] == 0.0

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            build_precision_state(np.ones((1, 2)))

    def test_auto_ridge_is_scale_aware(self):
        X = np.random.default_rng(0).standard_normal((50, 4)) * 10
        st = build_precision_state(X)
        scatter_trace = np.trace(st.v_matrix) - 4 * st.ridge
        assert st.ridge == pytest.approx(1e-6 * scatter_trace / 4, rel=1e-6)

    def test_eigenvalues_at_least_ridge(self):
        X = np.random.default_rng(1).standard_normal((10, 6))
        st = build_precision_state(X, ridge=0.5)
        assert np.linalg.eigvalsh(st.v_matrix).min() >= 0.5 - 1e-9


class TestExplorationBonus:
    def test_zero_at_mean(self):
        X = np.random.default_rng(2).standard_normal((30, 4))
        st = build_precision_state(X)
        assert exploration_bonus(st, st.x_bar) == pytest.approx(0.0, abs=1e-12)

    def test_homogeneity(self):
        X = np.random.default_rng(3).standard_normal((40, 5))
        st = build_precision_state(X)
        u = np.array([0.3, -1.0, 0.2, 0.0, 2.0])
        b1 = exploration_bonus(st, st.x_bar + u)
        b2 = exploration_bonus(st, st.x_bar + 2 * u)
        assert b2 == pytest.approx(2 * b1, rel=1e-10)

    def test_diagonal_hand_case(self):
        st = PrecisionState(v_matrix=np.diag([4.0, 1.0]), x_bar=np.zeros(2),
                            ridge=1e-12, n_obs=2)
        assert st.bonus(np.array([2.0, 3.0])) == pytest.approx(np.sqrt(10.0), abs=1e-12)

    def test_nonnegative_and_zero_only_at_mean(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((60, 3))
        st = build_precision_state(X)
        pts = rng.standard_normal((200, 3))
        b = st.bonus(pts)
        assert np.all(b >= 0)
        assert np.all(b[np.any(np.abs(pts - st.x_bar) > 1e-6, axis=1)] > 0)

    def test_transformer_interface(self):
        X = np.random.default_rng(5).standard_normal((25, 3))
        tr = ExplorationBonus().fit(X)
        out = tr.transform(X[:4])
        assert out.shape == (4, 1)
        assert np.allclose(out.ravel(), tr.state_.bonus(X[:4]))


class TestUCBScore:
    def _model(self, theta):
        m = L1LogisticRegression(penalty_grid=[0.1])
        m.theta_ = np.asarray(theta, dtype=float)
        m.penalty_ = 0.1
        m.n_features_in_ = len(theta) - 1
        return m

    def test_alpha_zero_reduces_to_probability(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((50, 3))
        st = build_precision_state(X)
        m = self._model([0.2, 0.5, -0.5, 1.0])
        x = rng.standard_normal(3)
        assert ucb_score(m, st, BonusParams(0.0), x) == predict_probability(m, x)

    def test_zero_bonus_at_mean(self):
        X = np.random.default_rng(7).standard_normal((50, 3))
        st = build_precision_state(X)
        m = self._model([0.2, 0.5, -0.5, 1.0])
        assert ucb_score(m, st, BonusParams(1.96), st.x_bar) == pytest.approx(
            predict_probability(m, st.x_bar), abs=1e-9)

    def test_composition_hand_case(self):
        st = PrecisionState(v_matrix=np.diag([4.0, 1.0]), x_bar=np.zeros(2),
                            ridge=1e-12, n_obs=2)
        m = self._model([0.0, 0.0, 0.0])
        s = ucb_score(m, st, BonusParams(1.96), np.array([2.0, 3.0]))
        assert s == pytest.approx(0.5 + 1.96 * np.sqrt(10.0), abs=1e-9)
        assert s == pytest.approx(6.698100, abs=1e-4)

    def test_score_dominates_belief_for_nonnegative_alpha(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((40, 4))
        st = build_precision_state(X)
        m = self._model([0.0, 1.0, 0.0, -1.0, 0.5])
        pts = rng.standard_normal((100, 4))
        assert np.all(ucb_score(m, st, BonusParams(0.7), pts)
                      >= predict_probability(m, pts))

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            BonusParams(-0.1)


class TestSerialization:
    def test_model_keyvalue_roundtrip_exact(self):
        X, y = synthetic(10, 500, np.array([0.2, 0.9, -0.6]))
        m = fit_l1_logistic(X, y, penalty_grid=[0.01], seed=6)
        clone = model_from_keyvalue(model_to_keyvalue(m))
        assert np.array_equal(clone.theta_, m.theta_)
        assert clone.penalty_ == m.penalty_

    def test_precision_keyvalue_roundtrip_exact(self):
        X = np.random.default_rng(11).standard_normal((20, 4))
        st = build_precision_state(X)
        clone = precision_state_from_keyvalue(precision_state_to_keyvalue(st))
        assert np.array_equal(clone.v_matrix, st.v_matrix)
        assert np.array_equal(clone.x_bar, st.x_bar)
        assert clone.ridge == st.ridge and clone.n_obs == st.n_obs
