"""Association tests for the outcome coefficients.

The covariance of alpha = (a, b) is approximated by inverting the
alpha-block of the observed information, assembled from complete-data
curvature and score pieces via the missing-information identity

    I(theta) = sum_i E[B_i | psi_i] - sum_i sum_j E[S_i S_j' | psi_i, psi_j]

with per-subject complete-data negative Hessians B_i and scores S_i; cross
terms (i != j) factor into E[S_i] E[S_j]' by independence across subjects.
Cross-information between alpha and the structural parameters is dropped and
the outcome residual variance is treated as fixed.  Global and per-component
chi-square statistics follow.  For Bernoulli fits the same construction runs
with logistic complete-likelihood derivatives on the posterior grid; those
p-values carry an "asymptotics unverified" flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, gammaincc

from .errors import DataFormatError, DimensionMismatchError, NumericalDomainError
from .em_binary import DEFAULT_QUAD_NODES, SufficientStats, e_step_binary
from .em_gaussian import FitResult
from .model import (
    BERNOULLI,
    GAUSSIAN,
    DataSet,
    Theta,
    conditional_latent_moments,
    log_likelihood_gaussian,
)


def fit_from_theta(theta: Theta, data: DataSet) -> FitResult:
    """Wrap an already-estimated parameter set so the test operations can
    run on it, e.g. a model reloaded from disk.

    Gaussian conditional moments are recomputed from the data; Bernoulli
    information assembly reruns its own E-step and needs no moments here.
    """
    if theta.family == GAUSSIAN:
        moments = conditional_latent_moments(theta, data)
        trace = (log_likelihood_gaussian(theta, data),)
    else:
        moments = None
        trace = ()
    return FitResult(theta=theta, loglik_trace=trace, iterations=0,
                     converged=True, final_moments=moments)


@dataclass(frozen=True)
class TestResult:
    """One chi-square association test."""

    statistic: float
    df: int
    p_value: float
    kind: str                      # "full" or "componentwise"
    component: Optional[int] = None
    asymptotics_unverified: bool = False


def chi_square_survival(x: float, df: int) -> float:
    """Upper-tail probability P(X >= x) for X ~ chi-square(df).

    Computed as the regularized upper incomplete gamma Q(df/2, x/2).
    """
    if df < 1:
        raise DataFormatError(f"df must be >= 1, got {df}")
    if not np.isfinite(x) or x < 0:
        raise DataFormatError(f"statistic must be finite and >= 0, got {x!r}")
    return float(gammaincc(df / 2.0, x / 2.0))


def _th_transform(r: int, b_diag: np.ndarray) -> np.ndarray:
    """Row-convention map (t, u) -> (t, h): columns [I, -diag(B); 0, I]."""
    A = np.eye(2 * r)
    A[:r, r:] = -np.diag(b_diag)
    return A


def _louis_alpha_gaussian(fit: FitResult, data: DataSet) -> np.ndarray:
    theta = fit.theta
    moments = fit.final_moments
    r = theta.r
    A = _th_transform(r, theta.B)
    i_nu = slice(0, 2 * r)
    m = moments.mean[:, i_nu] @ A                     # (N, 2r) means of (t, h)
    V = A.T @ moments.cov[i_nu, i_nu] @ A             # shared conditional cov
    alpha = np.concatenate([theta.a, theta.b])
    sg2 = theta.sigma_g2

    mu = data.z - m @ alpha                           # E[z - linpred | psi] pieces
    c = V @ alpha
    s2 = float(alpha @ c)

    sum_B = (m.T @ m + data.N * V) / sg2

    # E[S_i S_i'] via Gaussian fourth-moment identities:
    #   E[e^2 g'g] = (mu^2 + a'Va)(m'm + V) - 2 mu (m'c' + c m') + 2 c c'
    w2 = mu ** 2 + s2
    t1 = (m * w2[:, None]).T @ m + float(np.sum(w2)) * V
    mw = mu @ m                                       # sum_i mu_i m_i
    t2 = np.outer(mw, c) + np.outer(c, mw)
    sum_SS = (t1 - 2.0 * t2 + 2.0 * data.N * np.outer(c, c)) / sg2 ** 2

    ES = (mu[:, None] * m - c[None, :]) / sg2         # per-subject E[S_i]
    total = ES.sum(axis=0)
    cross = np.outer(total, total) - ES.T @ ES        # sum over i != j
    info = sum_B - (sum_SS + cross)
    return 0.5 * (info + info.T)


def _louis_beta_binary(theta: Theta, data: DataSet,
                       stats: SufficientStats) -> np.ndarray:
    if stats.post_weights is None:
        raise NumericalDomainError(
            "binary information needs the stored posterior weight matrix; "
            "the grid is too large to retain it (reduce M)")
    lin = theta.a0 + stats.t_grid @ theta.a + stats.h_grid @ theta.b
    sig = expit(lin)
    D = np.hstack([np.ones((stats.grid.n_points, 1)), stats.t_grid, stats.h_grid])
    cw0, cw1 = stats.class_weights
    wtot = cw0 + cw1

    sum_B = np.einsum("m,mj,mk->jk", wtot * sig * (1.0 - sig), D, D)
    sum_SS = (np.einsum("m,mj,mk->jk", cw1 * (1.0 - sig) ** 2, D, D)
              + np.einsum("m,mj,mk->jk", cw0 * sig ** 2, D, D))
    ES = (stats.post_weights * (data.z[:, None] - sig[None, :])) @ D
    total = ES.sum(axis=0)
    cross = np.outer(total, total) - ES.T @ ES
    info = sum_B - (sum_SS + cross)
    return 0.5 * (info + info.T)


def _require_pd(info: np.ndarray, what: str) -> None:
    eigs = np.linalg.eigvalsh(info)
    if eigs[0] <= 0:
        raise NumericalDomainError(
            f"{what} is not positive definite (smallest eigenvalue "
            f"{eigs[0]:.3e}); the fit may be degenerate or the sample too "
            f"small for the asymptotic test")


def louis_information_alpha(fit: FitResult, data: DataSet,
                            M: int = DEFAULT_QUAD_NODES) -> np.ndarray:
    """Observed information of alpha = (a, b) at the fitted parameters.

    Gaussian fits use the exact conditional moments; Bernoulli fits rerun
    the quadrature E-step at ``M`` nodes, build the information for
    (a0, a, b) and marginalize the intercept out through the covariance.
    Returns a positive definite 2r x 2r matrix (alpha ordering: a then b).
    """
    theta = fit.theta
    if data.p != theta.p or data.q != theta.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({data.p}, {data.q}); theta expects ({theta.p}, {theta.q})")
    if theta.family == GAUSSIAN:
        info = _louis_alpha_gaussian(fit, data)
        _require_pd(info, "information matrix of (a, b)")
        return info
    stats = e_step_binary(theta, data, M)
    info_beta = _louis_beta_binary(theta, data, stats)
    _require_pd(info_beta, "information matrix of (a0, a, b)")
    cov_beta = np.linalg.inv(info_beta)
    cov_alpha = cov_beta[1:, 1:]
    info = np.linalg.inv(0.5 * (cov_alpha + cov_alpha.T))
    info = 0.5 * (info + info.T)
    _require_pd(info, "information matrix of (a, b)")
    return info


def test_full(fit: FitResult, info: np.ndarray) -> TestResult:
    """Global test of (a, b) = 0: statistic alpha I alpha' ~ chi-square(2r)."""
    theta = fit.theta
    r = theta.r
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (2 * r, 2 * r):
        raise DimensionMismatchError(
            f"info must be {2 * r} x {2 * r}, got {info.shape}")
    alpha = np.concatenate([theta.a, theta.b])
    stat = float(alpha @ info @ alpha)
    if stat < 0:
        raise NumericalDomainError(
            f"negative test statistic {stat:.3e}; information matrix is not "
            f"positive definite")
    df = 2 * r
    return TestResult(statistic=stat, df=df,
                      p_value=chi_square_survival(stat, df), kind="full",
                      asymptotics_unverified=theta.family == BERNOULLI)


def test_componentwise(fit: FitResult, info: np.ndarray, k: int) -> TestResult:
    """Test of (a_k, b_k) = 0 for joint component k (1-based):
    statistic ~ chi-square(2) using the corresponding covariance sub-block."""
    theta = fit.theta
    r = theta.r
    if not 1 <= k <= r:
        raise DimensionMismatchError(f"component k must be in [1, {r}], got {k}")
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (2 * r, 2 * r):
        raise DimensionMismatchError(
            f"info must be {2 * r} x {2 * r}, got {info.shape}")
    cov = np.linalg.inv(info)
    idx = np.array([k - 1, r + k - 1])
    sub = cov[np.ix_(idx, idx)]
    alpha_k = np.array([theta.a[k - 1], theta.b[k - 1]])
    try:
        stat = float(alpha_k @ np.linalg.solve(sub, alpha_k))
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError(
            f"covariance sub-block of component {k} is singular") from exc
    if stat < 0:
        raise NumericalDomainError(
            f"negative test statistic {stat:.3e} for component {k}")
    return TestResult(statistic=stat, df=2,
                      p_value=chi_square_survival(stat, 2),
                      kind="componentwise", component=k,
                      asymptotics_unverified=theta.family == BERNOULLI)
