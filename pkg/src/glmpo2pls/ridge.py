"""Cross-validated ridge regression baselines (single feature block).

Gaussian outcomes use the closed-form solution on each fold via a thin SVD,
which covers both the primal (p <= N) and kernel/dual (p > N) regimes with
one factorization per fold.  Bernoulli outcomes use penalized IRLS with the
held-out deviance as the selection score; when p > N the problem is reduced
exactly to the row space of the design first.  The intercept is handled by
centering and is never penalized; features are left on their native scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import DataFormatError, DimensionMismatchError, EstimationError
from .model import BERNOULLI, FAMILIES, GAUSSIAN

_DEFAULT_GRID_SIZE = 50
_IRLS_MAX_ITER = 60
_IRLS_TOL = 1e-9


@dataclass(frozen=True)
class RidgeFit:
    """Fitted ridge model: coefficients on the native feature scale, the
    unpenalized intercept, the selected penalty and its CV score curve."""

    coef: np.ndarray
    intercept: float
    lam: float
    family: str
    lambda_grid: np.ndarray
    cv_scores: np.ndarray

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.coef.shape[0]:
            raise DimensionMismatchError(
                f"X must have {self.coef.shape[0]} columns, got shape {X.shape}")
        return X @ self.coef + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Outcome-scale prediction: the linear predictor for the Gaussian
        family, the success probability for the Bernoulli family."""
        eta = self.linear_predictor(X)
        return eta if self.family == GAUSSIAN else expit(eta)


def default_lambda_grid(p: int, N: int, size: int = _DEFAULT_GRID_SIZE) -> np.ndarray:
    """Log-spaced penalty grid [1e-4, 1e4] scaled by p / N."""
    return np.logspace(-4, 4, size) * (p / N)


def _gaussian_coef_path(X: np.ndarray, z: np.ndarray, lams: np.ndarray) -> np.ndarray:
    """Ridge coefficients for every penalty from one thin SVD; (len(lams), p).
    Expects X and z already centered."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    uz = (U.T @ z) * s                      # s_j * u_j'z
    shrink = uz[None, :] / (s[None, :] ** 2 + lams[:, None])
    return shrink @ Vt


def _deviance(z: np.ndarray, eta: np.ndarray) -> float:
    # -2 log-likelihood of independent Bernoulli picks, stable in eta
    return float(-2.0 * np.sum(z * log_expit(eta) + (1.0 - z) * log_expit(-eta)))


def _irls_path(X: np.ndarray, z: np.ndarray, lams: np.ndarray) -> np.ndarray:
    """Penalized logistic coefficients (intercept first) per penalty;
    (len(lams), p + 1).  Warm-starts along the grid from large penalties."""
    N, p = X.shape
    A = np.hstack([np.ones((N, 1)), X])
    out = np.empty((lams.size, p + 1))
    order = np.argsort(lams)[::-1]          # stiff problems first
    beta = np.zeros(p + 1)
    for pos in order:
        lam = lams[pos]
        pen = np.full(p + 1, lam)
        pen[0] = 0.0
        for _ in range(_IRLS_MAX_ITER):
            eta = A @ beta
            mu = expit(eta)
            wvec = np.maximum(mu * (1.0 - mu), 1e-10)
            H = (A * wvec[:, None]).T @ A
            H[np.diag_indices_from(H)] += pen
            grad = A.T @ (z - mu) - pen * beta
            try:
                delta = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError as exc:
                raise EstimationError("IRLS system became singular") from exc
            beta = beta + delta
            if float(np.max(np.abs(delta))) < _IRLS_TOL * (1.0 + float(np.max(np.abs(beta)))):
                break
        out[pos] = beta
    return out


def _binary_fit_reduced(X: np.ndarray, z: np.ndarray, lams: np.ndarray) -> np.ndarray:
    """Exact p > N reduction: penalized logistic on the row space, mapped
    back to native coefficients; (len(lams), p + 1)."""
    N, p = X.shape
    if p <= N:
        return _irls_path(X, z, lams)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    keep = s > s[0] * max(N, p) * np.finfo(np.float64).eps if s.size else s
    Xr = U[:, keep] * s[keep]
    path_r = _irls_path(Xr, z, lams)
    out = np.empty((lams.size, p + 1))
    out[:, 0] = path_r[:, 0]
    out[:, 1:] = path_r[:, 1:] @ Vt[keep]
    return out


def _cv_folds(N: int, folds: int, seed: int):
    perm = np.random.default_rng(seed).permutation(N)
    return np.array_split(perm, folds)


def ridge_fit_cv(X: np.ndarray, z: np.ndarray, family: str = GAUSSIAN,
                 lambda_grid: np.ndarray | None = None, folds: int = 10,
                 seed: int = 0) -> RidgeFit:
    """Ridge fit with K-fold cross-validated penalty selection.

    The score is the validation mean squared error (Gaussian) or deviance
    (Bernoulli); ties on the grid resolve to the smaller penalty.  The final
    model is refit on all rows at the selected penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError(f"X must be 2-d, got ndim={X.ndim}")
    if z.shape != (X.shape[0],):
        raise DimensionMismatchError(
            f"z must have shape ({X.shape[0]},), got {z.shape}")
    if family not in FAMILIES:
        raise DataFormatError(f"unknown family {family!r}; expected one of {FAMILIES}")
    N, p = X.shape
    if folds < 2 or folds > N:
        raise DataFormatError(f"folds must be in [2, N], got {folds}")
    if family == BERNOULLI and not np.all((z == 0.0) | (z == 1.0)):
        raise DataFormatError("bernoulli outcome must be 0/1")
    lams = default_lambda_grid(p, N) if lambda_grid is None else \
        np.asarray(lambda_grid, dtype=np.float64)
    if lams.ndim != 1 or lams.size == 0 or np.any(lams <= 0):
        raise DataFormatError("lambda_grid must be a 1-d array of positive penalties")

    scores = np.zeros(lams.size)
    counts = np.zeros(lams.size)
    for val_idx in _cv_folds(N, folds, seed):
        mask = np.ones(N, dtype=bool)
        mask[val_idx] = False
        Xtr, ztr = X[mask], z[mask]
        Xva, zva = X[val_idx], z[val_idx]
        if family == GAUSSIAN:
            xm = Xtr.mean(axis=0)
            zm = float(ztr.mean())
            path = _gaussian_coef_path(Xtr - xm, ztr - zm, lams)
            pred = (Xva - xm) @ path.T + zm
            scores += np.mean((zva[:, None] - pred) ** 2, axis=0) * val_idx.size
        else:
            path = _binary_fit_reduced(Xtr, ztr, lams)
            eta = Xva @ path[:, 1:].T + path[:, 0]
            for j in range(lams.size):
                scores[j] += _deviance(zva, eta[:, j])
        counts += val_idx.size
    scores = scores / counts
    best = int(np.argmin(scores))
    lam = float(lams[best])

    if family == GAUSSIAN:
        xm = X.mean(axis=0)
        zm = float(z.mean())
        coef = _gaussian_coef_path(X - xm, z - zm, np.array([lam]))[0]
        intercept = zm - float(xm @ coef)
    else:
        beta = _binary_fit_reduced(X, z, np.array([lam]))[0]
        intercept = float(beta[0])
        coef = beta[1:]
    return RidgeFit(coef=coef, intercept=intercept, lam=lam, family=family,
                    lambda_grid=lams, cv_scores=scores)
