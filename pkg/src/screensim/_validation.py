"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(X, n_features: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float array, optionally enforcing the column count."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"feature dimension mismatch: expected {n_features}, got {X.shape[1]}"
        )
    return X


def check_binary_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be 1-D")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError(f"labels must be in {{0,1}}, got values {uniq[:5]}")
    return y.astype(int)


def check_vector(x, length: int | None = None, name: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if length is not None and x.shape[0] != length:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {length}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_simplex(shares: dict[str, float], tol: float = 1e-9) -> None:
    vals = np.asarray(list(shares.values()), dtype=float)
    if np.any(vals < 0):
        raise ValueError("shares must be nonnegative")
    if abs(vals.sum() - 1.0) > tol:
        raise ValueError(f"shares must sum to 1 (got {vals.sum():.12f})")


def check_psd(mat: np.ndarray, name: str = "covariance", tol: float = 1e-8) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    scale = max(1.0, float(np.trace(mat)) / max(1, mat.shape[0]))
    eigvals = np.linalg.eigvalsh(mat)
    if eigvals.min() < -tol * scale:
        raise ValueError(f"{name} is not positive semidefinite (min eig {eigvals.min():.3e})")
    return mat


def check_probability(p, name: str = "probability", open_interval: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if open_interval:
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError(f"{name} must lie strictly in (0, 1)")
    else:
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError(f"{name} must lie in [0, 1]")
    return p


def child_rng(seed: int, *salts: int) -> np.random.Generator:
    """Deterministic child generator derived from a master seed and integer salts."""
    return np.random.default_rng([int(seed)] + [int(s) for s in salts])
