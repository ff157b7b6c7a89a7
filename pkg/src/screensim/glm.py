"""L1-regularized logistic regression and precision-matrix exploration bonuses.

The regression is fit by proximal gradient descent (soft-thresholding) with
the penalty chosen by cross-validated log-loss on a class-balanced subsample.
The exploration side maintains a centered scatter matrix V over the training
rows and scores a feature vector x by the Mahalanobis-style distance
sqrt((x - x_bar)' V^-1 (x - x_bar)), solved through a Cholesky factorization.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_binary_labels, check_feature_matrix, child_rng
from .metrics import roc_auc

DEFAULT_PENALTY_GRID = tuple(np.logspace(-4, 4, 13))
_PROB_EPS = 1e-12


class SingleClassError(ValueError):
    """Raised when a fit is requested on single-class data (untrainable)."""


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def logistic_loss_and_grad(theta, X, y):
    """Mean logistic log-loss and its gradient (smooth part only).

    ``theta`` has the intercept first; ``X`` excludes the intercept column.
    """
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    z = theta[0] + X @ theta[1:]
    # log(1 + exp(z)) - y*z, computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = expit(z) - y
    grad = np.empty_like(theta)
    grad[0] = r.sum() / n
    grad[1:] = X.T @ r / n
    return loss, grad


def l1_objective(theta, X, y, penalty: float) -> float:
    loss, _ = logistic_loss_and_grad(theta, X, y)
    return loss + penalty * float(np.abs(np.asarray(theta)[1:]).sum())


def _proximal_fit(X, y, penalty, theta_init=None, tol=1e-8, max_iter=10000):
    """FISTA with adaptive restart; intercept unpenalized.

    Returns (theta, converged, iterations).
    """
    n, d = X.shape
    ones = np.ones((n, 1))
    lip = np.linalg.norm(np.hstack([ones, X]), 2) ** 2 / (4.0 * n)
    step = 1.0 / max(lip, 1e-12)

    theta = np.zeros(d + 1) if theta_init is None else np.asarray(theta_init, dtype=float).copy()
    z = theta.copy()
    t_k = 1.0
    for it in range(1, max_iter + 1):
        _, grad = logistic_loss_and_grad(z, X, y)
        nxt = z - step * grad
        nxt[1:] = soft_threshold(nxt[1:], step * penalty)
        delta = float(np.max(np.abs(nxt - theta)))
        if np.dot(z - nxt, nxt - theta) > 0:
            # momentum points uphill: restart acceleration
            t_new = 1.0
            z = nxt.copy()
        else:
            t_new = (1.0 + np.sqrt(1.0 + 4.0 * t_k**2)) / 2.0
            z = nxt + ((t_k - 1.0) / t_new) * (nxt - theta)
        theta = nxt
        t_k = t_new
        if delta < tol:
            return theta, True, it
    return theta, False, max_iter


def balanced_indices(y, seed: int) -> np.ndarray:
    """Row indices of a 50/50 subsample made by undersampling the majority label."""
    y = check_binary_labels(y)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassError("cannot balance single-class data")
    rng = child_rng(seed, 101)
    if len(pos) > len(neg):
        pos = rng.choice(pos, size=len(neg), replace=False)
    elif len(neg) > len(pos):
        neg = rng.choice(neg, size=len(pos), replace=False)
    return np.sort(np.concatenate([pos, neg]))


def balanced_subsample(X, y, seed: int):
    """Undersample the majority label to an exact 50/50 split.

    Deterministic per seed; rows keep their original relative order.
    """
    X = check_feature_matrix(X)
    idx = balanced_indices(y, seed)
    return X[idx], np.asarray(y)[idx].astype(int), idx


def _fold_assignment(n, folds, rng):
    perm = rng.permutation(n)
    return np.array_split(perm, folds)


def _cv_penalty(X, y, grid, folds, seed, tol, max_iter):
    """Mean validation log-loss per penalty; refolds on single-class folds."""
    n = len(y)
    grid = np.asarray(grid, dtype=float)
    order = np.argsort(-grid)  # largest penalty first for warm-started paths
    for attempt in range(5):
        rng = child_rng(seed, 102, attempt)
        parts = _fold_assignment(n, folds, rng)
        ok = all(
            len(np.unique(y[np.setdiff1d(np.arange(n), val)])) == 2 and len(val) > 0
            for val in parts
        )
        if not ok:
            continue
        losses = np.zeros((folds, len(grid)))
        for f, val in enumerate(parts):
            tr = np.setdiff1d(np.arange(n), val)
            theta = None
            for pos in order:
                theta, _, _ = _proximal_fit(
                    X[tr], y[tr], grid[pos], theta_init=theta, tol=tol, max_iter=max_iter
                )
                p = np.clip(expit(theta[0] + X[val] @ theta[1:]), _PROB_EPS, 1 - _PROB_EPS)
                losses[f, pos] = -np.mean(y[val] * np.log(p) + (1 - y[val]) * np.log(1 - p))
        return losses.mean(axis=0)
    raise SingleClassError("could not build folds with both classes after 5 attempts")


class L1LogisticRegression(BaseEstimator):
    """Logistic regression with an L1 penalty on the slopes.

    Parameters
    ----------
    penalty_grid : sequence of float, optional
        Candidate penalties; defaults to 13 log-spaced points in [1e-4, 1e4].
        A single-element grid skips cross-validation.
    folds : int
        Cross-validation folds used to pick the penalty.
    seed : int
        Drives the balanced subsample and fold shuffling.
    balance : bool
        Undersample the majority label to 50/50 before fitting.
    tol, max_iter : float, int
        Proximal-gradient stopping rule: max coefficient change below ``tol``
        or ``max_iter`` iterations (a warning is issued on non-convergence).

    Attributes (after fit)
    ----------------------
    theta_ : ndarray of shape (d + 1,), intercept first.
    penalty_ : float, the selected penalty.
    train_log_loss_, train_auc_ : in-sample diagnostics on the fitting sample.
    """

    def __init__(self, penalty_grid=None, folds=4, seed=0, balance=True,
                 tol=1e-8, max_iter=10000):
        self.penalty_grid = penalty_grid
        self.folds = folds
        self.seed = seed
        self.balance = balance
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, theta_init=None):
        X = check_feature_matrix(X)
        y = check_binary_labels(y)
        if len(X) != len(y):
            raise ValueError("X and y must agree in length")
        grid = np.asarray(
            DEFAULT_PENALTY_GRID if self.penalty_grid is None else self.penalty_grid,
            dtype=float,
        )
        if self.balance:
            Xb, yb, _ = balanced_subsample(X, y, self.seed)
        else:
            if len(np.unique(y)) < 2:
                raise SingleClassError("single-class training data")
            Xb, yb = X, y
        if len(grid) > 1:
            if len(yb) < 2 * self.folds:
                raise ValueError("too few rows after balancing for cross-validation")
            cv_losses = _cv_penalty(Xb, yb, grid, self.folds, self.seed,
                                    self.tol, self.max_iter)
            self.penalty_ = float(grid[int(np.argmin(cv_losses))])
            self.cv_log_loss_ = cv_losses
        else:
            self.penalty_ = float(grid[0])
            self.cv_log_loss_ = None
        theta, converged, n_iter = _proximal_fit(
            Xb, yb, self.penalty_, theta_init=theta_init,
            tol=self.tol, max_iter=self.max_iter,
        )
        if not converged:
            warnings.warn(
                f"proximal gradient did not converge in {self.max_iter} iterations; "
                "returning best iterate",
                RuntimeWarning,
            )
        self.theta_ = theta
        self.converged_ = converged
        self.n_iter_ = n_iter
        self.n_features_in_ = X.shape[1]
        p = self.predict_proba(Xb)[:, 1]
        p = np.clip(p, _PROB_EPS, 1 - _PROB_EPS)
        self.train_log_loss_ = float(-np.mean(yb * np.log(p) + (1 - yb) * np.log(1 - p)))
        try:
            self.train_auc_ = roc_auc(p, yb)
        except ValueError:
            self.train_auc_ = float("nan")
        return self

    @property
    def intercept_(self) -> float:
        return float(self.theta_[0])

    @property
    def coef_(self) -> np.ndarray:
        return self.theta_[1:]

    def decision_function(self, X):
        X = check_feature_matrix(X, self.n_features_in_)
        return self.theta_[0] + X @ self.theta_[1:]

    def predict_proba(self, X):
        p = np.clip(expit(self.decision_function(X)), _PROB_EPS, 1 - _PROB_EPS)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def fit_l1_logistic(X, y, penalty_grid=None, folds=4, seed=0, balance=True,
                    theta_init=None, tol=1e-8, max_iter=10000) -> L1LogisticRegression:
    """Functional wrapper around :class:`L1LogisticRegression`."""
    model = L1LogisticRegression(
        penalty_grid=penalty_grid, folds=folds, seed=seed, balance=balance,
        tol=tol, max_iter=max_iter,
    )
    return model.fit(X, y, theta_init=theta_init)


def predict_probability(model: L1LogisticRegression, x):
    """Predicted success probability for one feature vector or a stack of them."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(model.predict_proba(x.reshape(1, -1))[0, 1])
    return model.predict_proba(x)[:, 1]


@dataclass
class BonusParams:
    """Exploration weight; 1.96 puts the score at the upper 95% bound."""

    alpha: float = 1.96

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


@dataclass
class PrecisionState:
    """Centered scatter matrix of the training rows plus its Cholesky factor.

    ``v_matrix`` is sum_j (x_j - x_bar)(x_j - x_bar)' + ridge * I, guaranteed
    symmetric PSD with eigenvalues >= ridge.
    """

    v_matrix: np.ndarray
    x_bar: np.ndarray
    ridge: float
    n_obs: int
    _chol: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.v_matrix = np.asarray(self.v_matrix, dtype=float)
        self.x_bar = np.asarray(self.x_bar, dtype=float)
        if not np.allclose(self.v_matrix, self.v_matrix.T, atol=1e-9):
            raise ValueError("precision scatter must be symmetric")

    @property
    def dim(self) -> int:
        return len(self.x_bar)

    def _factor(self):
        if self._chol is None:
            try:
                self._chol = cho_factor(self.v_matrix, lower=True)
            except np.linalg.LinAlgError as exc:  # pragma: no cover - ridge guards this
                raise ValueError("Cholesky factorization failed despite ridge") from exc
        return self._chol

    def bonus(self, x):
        """sqrt((x - x_bar)' V^-1 (x - x_bar)) for a vector or row-stack."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = check_feature_matrix(x, self.dim)
        centered = X - self.x_bar
        solved = cho_solve(self._factor(), centered.T)
        quad = np.einsum("ij,ji->i", centered, solved)
        out = np.sqrt(np.maximum(quad, 0.0))
        return float(out[0]) if single else out


def build_precision_state(X, ridge: float | None = None) -> PrecisionState:
    """Centered scatter matrix of the rows of X, ridge-stabilized.

    ``ridge=None`` uses the scale-aware default 1e-6 * trace(scatter) / d,
    floored at 1e-12 so a zero-scatter input still factorizes.
    """
    X = check_feature_matrix(X)
    n, d = X.shape
    if n < 2:
        raise ValueError("precision state needs at least 2 rows")
    x_bar = X.mean(axis=0)
    centered = X - x_bar
    scatter = centered.T @ centered
    scatter = 0.5 * (scatter + scatter.T)
    if ridge is None:
        ridge = max(1e-6 * float(np.trace(scatter)) / d, 1e-12)
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    v = scatter + ridge * np.eye(d)
    return PrecisionState(v_matrix=v, x_bar=x_bar, ridge=float(ridge), n_obs=n)


def exploration_bonus(state: PrecisionState, x):
    """Distance of x from the training mean, weighted by the precision matrix."""
    return state.bonus(x)


def ucb_score(model: L1LogisticRegression, state: PrecisionState,
              params: BonusParams, x):
    """Predicted probability plus alpha times the exploration bonus.

    This is a score, not a probability; it can exceed 1.
    """
    return predict_probability(model, x) + params.alpha * state.bonus(x)


class ExplorationBonus(BaseEstimator, TransformerMixin):
    """Transformer view of the bonus: fit on training rows, transform to bonuses."""

    def __init__(self, ridge: float | None = None):
        self.ridge = ridge

    def fit(self, X, y=None):
        self.state_ = build_precision_state(X, ridge=self.ridge)
        self.n_features_in_ = self.state_.dim
        return self

    def transform(self, X):
        return np.asarray(self.state_.bonus(check_feature_matrix(X, self.n_features_in_))).reshape(-1, 1)


# ---------------------------------------------------------------------------
# flat key-value serialization (reproducibility audits, run checkpoints)

def model_to_keyvalue(model: L1LogisticRegression) -> str:
    lines = [f"intercept\t{model.intercept_!r}"]
    for j, c in enumerate(model.coef_):
        lines.append(f"coef_{j}\t{float(c)!r}")
    lines.append(f"penalty\t{model.penalty_!r}")
    lines.append(f"train_log_loss\t{model.train_log_loss_!r}")
    lines.append(f"train_auc\t{model.train_auc_!r}")
    return "\n".join(lines) + "\n"


def model_from_keyvalue(text: str) -> L1LogisticRegression:
    kv = _parse_keyvalue(text)
    coefs = sorted((k for k in kv if k.startswith("coef_")), key=lambda k: int(k[5:]))
    model = L1LogisticRegression(penalty_grid=[kv["penalty"]])
    model.theta_ = np.array([kv["intercept"]] + [kv[k] for k in coefs])
    model.penalty_ = kv["penalty"]
    model.train_log_loss_ = kv.get("train_log_loss", float("nan"))
    model.train_auc_ = kv.get("train_auc", float("nan"))
    model.n_features_in_ = len(coefs)
    model.converged_ = True
    return model


def precision_state_to_keyvalue(state: PrecisionState) -> str:
    lines = [f"ridge\t{state.ridge!r}", f"n_obs\t{state.n_obs}"]
    for i, v in enumerate(state.x_bar):
        lines.append(f"x_bar_{i}\t{float(v)!r}")
    d = state.dim
    for i in range(d):
        for j in range(i, d):  # upper triangle; symmetric
            lines.append(f"v_{i}_{j}\t{float(state.v_matrix[i, j])!r}")
    return "\n".join(lines) + "\n"


def precision_state_from_keyvalue(text: str) -> PrecisionState:
    kv = _parse_keyvalue(text)
    xs = sorted((k for k in kv if k.startswith("x_bar_")), key=lambda k: int(k[6:]))
    d = len(xs)
    x_bar = np.array([kv[k] for k in xs])
    v = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            v[i, j] = v[j, i] = kv[f"v_{i}_{j}"]
    return PrecisionState(v_matrix=v, x_bar=x_bar, ridge=float(kv["ridge"]),
                          n_obs=int(kv["n_obs"]))


def _parse_keyvalue(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for line in io.StringIO(text):
        line = line.strip()
        if not line:
            continue
        key, val = line.split("\t")
        out[key] = float(val)
    return out
