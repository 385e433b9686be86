"""EM estimation for the Gaussian-outcome model.

The complete-data log-likelihood separates into independent blocks: the
outcome term in (a, b, sigma_g2), the x reconstruction term in
(W, W_perp, sigma_e2), the y term in (C, C_perp, sigma_f2), the u | t term
in (B, Sigma_h) and the latent prior terms in the remaining diagonal
covariances.  Every block maximizer is closed form; the loading updates are
orthogonal-Procrustes (polar) factors of residualized cross-moments, so each
EM iteration cannot decrease the observed log-likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataFormatError, DimensionMismatchError, EstimationError
from .model import (
    BERNOULLI,
    GAUSSIAN,
    VARIANCE_FLOOR,
    DataSet,
    LatentMoments,
    ModelDims,
    Theta,
    canonicalize,
    conditional_latent_moments,
    log_likelihood_gaussian,
)

logger = logging.getLogger(__name__)

_INIT_STRATEGIES = ("svd", "random")


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the EM loop.

    Convergence is declared when the relative change of the observed
    log-likelihood between consecutive iterations drops below ``rel_tol``.
    """

    max_iter: int = 1000
    rel_tol: float = 1e-6
    init_strategy: str = "svd"
    seed: Optional[int] = None
    canonicalize_each_iter: bool = False
    trace_likelihood: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise DataFormatError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.rel_tol > 0:
            raise DataFormatError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.init_strategy not in _INIT_STRATEGIES:
            raise DataFormatError(
                f"unknown init_strategy {self.init_strategy!r}; expected one of {_INIT_STRATEGIES}")


@dataclass(frozen=True)
class FitResult:
    """Outcome of an EM run."""

    theta: Theta
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    final_moments: LatentMoments
    beta_step_warning: bool = False

    def __post_init__(self):
        trace = np.asarray(self.loglik_trace, dtype=np.float64)
        trace.setflags(write=False)
        object.__setattr__(self, "loglik_trace", trace)


def _orthonormal_columns(rng, n, k):
    if k == 0:
        return np.zeros((n, 0))
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def _polar_factor(A: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes solution: the semi-orthogonal factor of A."""
    if A.shape[1] == 0:
        return np.zeros(A.shape)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if not s[0] > np.finfo(np.float64).tiny * 1e4:
        raise EstimationError(
            "loading update undefined: cross-moment between data and latent "
            "scores is numerically zero")
    return U @ Vt


def _top_right_singular(M: np.ndarray, k: int) -> np.ndarray:
    """Top-k right singular vectors of M as columns."""
    if k == 0:
        return np.zeros((M.shape[1], 0))
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    return Vt[:k].T


def init_params(data: DataSet, dims: ModelDims, config: FitConfig) -> Theta:
    """Starting values for EM.

    The ``svd`` strategy takes W and C from the top singular vectors of
    X'Y, the specific loadings from the deflated residuals, latent variances
    from the implied score variances, B from per-component score regressions
    and (a, b, sigma_g2) from least squares of z on the initial scores.  The
    ``random`` strategy draws orthonormal loadings from ``config.seed`` with
    unit variances.  The result is canonicalized.
    """
    if data.p != dims.p or data.q != dims.q or data.N != dims.N:
        raise DimensionMismatchError(
            f"data shape ({data.N}, {data.p}, {data.q}) does not match dims "
            f"({dims.N}, {dims.p}, {dims.q})")
    r, r_x, r_y = dims.r, dims.r_x, dims.r_y
    family = data.family

    if config.init_strategy == "random":
        rng = np.random.default_rng(config.seed)
        W = _orthonormal_columns(rng, dims.p, r)
        C = _orthonormal_columns(rng, dims.q, r)
        W_perp = _orthonormal_columns(rng, dims.p, r_x)
        C_perp = _orthonormal_columns(rng, dims.q, r_y)
        # strictly decreasing Sigma_t * B with B = 1
        st = 1.0 + 0.5 * np.arange(r - 1, -1, -1, dtype=np.float64)
        theta = Theta(W=W, W_perp=W_perp, C=C, C_perp=C_perp,
                      B=np.ones(r), Sigma_t=st, Sigma_tperp=np.ones(r_x),
                      Sigma_h=np.ones(r), Sigma_uperp=np.ones(r_y),
                      sigma_e2=1.0, sigma_f2=1.0,
                      a=np.zeros(r), b=np.zeros(r),
                      a0=_init_intercept(data),
                      sigma_g2=1.0 if family == GAUSSIAN else None,
                      family=family)
        return canonicalize(theta)

    X, Y, z = data.X, data.Y, data.z
    cross = X.T @ Y
    U, s, Vt = np.linalg.svd(cross, full_matrices=False)
    scale = max(dims.p, dims.q) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > scale))
    if rank < r:
        raise EstimationError(
            f"X'Y has numerical rank {rank} < r = {r}; reduce the number of "
            f"joint components")
    W = U[:, :r]
    C = Vt[:r].T

    X_res = X - (X @ W) @ W.T
    Y_res = Y - (Y @ C) @ C.T
    W_perp = _top_right_singular(X_res, r_x)
    C_perp = _top_right_singular(Y_res, r_y)

    T = X @ W
    Uscore = Y @ C
    T_perp = X_res @ W_perp
    U_perp = Y_res @ C_perp

    st = np.maximum(np.mean(T ** 2, axis=0), 1e-8)
    stp = np.maximum(np.mean(T_perp ** 2, axis=0), 1e-8) if r_x else np.zeros(0)
    sup = np.maximum(np.mean(U_perp ** 2, axis=0), 1e-8) if r_y else np.zeros(0)
    bd = np.maximum(np.sum(T * Uscore, axis=0) / np.sum(T ** 2, axis=0), 1e-8)
    H = Uscore - T * bd
    sh = np.maximum(np.mean(H ** 2, axis=0), 1e-8)

    resid_x = X_res - T_perp @ W_perp.T
    resid_y = Y_res - U_perp @ C_perp.T
    # floor at a fraction of the data scale: when r + r_x = p (or r + r_y = q)
    # the deflated residual is structurally zero, and a near-zero starting
    # noise variance makes the first E-step posteriors degenerate
    sigma_e2 = max(float(np.mean(resid_x ** 2)), 0.05 * float(np.mean(X ** 2)), 1e-8)
    sigma_f2 = max(float(np.mean(resid_y ** 2)), 0.05 * float(np.mean(Y ** 2)), 1e-8)

    design = np.hstack([T, H])
    coef, *_ = np.linalg.lstsq(design, z - (np.mean(z) if family == BERNOULLI else 0.0),
                               rcond=None)
    a = coef[:r]
    b = coef[r:]
    if family == GAUSSIAN:
        sigma_g2 = max(float(np.mean((z - design @ coef) ** 2)), 1e-8)
    else:
        sigma_g2 = None

    theta = Theta(W=W, W_perp=W_perp, C=C, C_perp=C_perp, B=bd,
                  Sigma_t=st, Sigma_tperp=stp, Sigma_h=sh, Sigma_uperp=sup,
                  sigma_e2=sigma_e2, sigma_f2=sigma_f2, a=a, b=b,
                  a0=_init_intercept(data), sigma_g2=sigma_g2, family=family)
    return canonicalize(theta)


def _init_intercept(data: DataSet) -> float:
    if data.family != BERNOULLI:
        return 0.0
    m = float(np.clip(np.mean(data.z), 1e-3, 1 - 1e-3))
    return float(np.log(m / (1.0 - m)))


def _th_moment_blocks(moments: LatentMoments, b_diag: np.ndarray):
    """Conditional moments of (t, h) with h = u - t B at the given B."""
    S = moments.second_moment_sum()
    it, iu = moments.idx_t, moments.idx_u
    Mt = moments.mean[:, it]
    Mu = moments.mean[:, iu]
    Mh = Mu - Mt * b_diag
    Stt = S[it, it]
    Stu = S[it, iu]
    Suu = S[iu, iu]
    Sth = Stu - Stt * b_diag
    Shh = (Suu - b_diag[:, None] * Stu - Stu.T * b_diag
           + b_diag[:, None] * Stt * b_diag)
    return Mt, Mh, Stt, Sth, Shh


def m_step_outcome(moments: LatentMoments, z: np.ndarray, b_diag: np.ndarray):
    """Closed-form update of (a, b, sigma_g2) from the normal equations of
    the outcome block, with h-moments formed at the current B.

    Returns ``(a, b, sigma_g2)``.
    """
    z = np.asarray(z, dtype=np.float64)
    r = moments.r
    Mt, Mh, Stt, Sth, Shh = _th_moment_blocks(moments, np.asarray(b_diag, dtype=np.float64))
    M2 = np.block([[Stt, Sth], [Sth.T, Shh]])
    M2 = 0.5 * (M2 + M2.T)
    rhs = np.concatenate([z @ Mt, z @ Mh])
    cond = np.linalg.cond(M2)
    if not np.isfinite(cond) or cond > 1e12:
        raise EstimationError(
            f"outcome update failed: second-moment matrix of (t, h) scores is "
            f"near-singular (condition number {cond:.3e}); t and h are "
            f"nearly collinear")
    alpha = np.linalg.solve(M2, rhs)
    n = moments.n
    sigma_g2 = float(z @ z - 2.0 * rhs @ alpha + alpha @ M2 @ alpha) / n
    if not sigma_g2 > VARIANCE_FLOOR:
        raise EstimationError(
            f"outcome residual variance collapsed to {sigma_g2:.3e}, at or "
            f"below the floor {VARIANCE_FLOOR:.1e}")
    return alpha[:r], alpha[r:], sigma_g2


def m_step_po2pls_blocks(moments: LatentMoments, data: DataSet,
                         theta_prev: Theta) -> dict:
    """Closed-form updates of the structural blocks shared by both families:
    loadings, B, latent variances and the two noise variances.

    Loading updates are polar factors of residualized cross-moments: W
    maximizes its trace objective given the previous W_perp, then W_perp is
    updated against the new W (likewise for C, C_perp), so the x and y block
    objectives never decrease.  Returns a dict of Theta field updates.
    """
    X, Y = data.X, data.Y
    N = data.N
    S = moments.second_moment_sum()
    it, iu = moments.idx_t, moments.idx_u
    itp, iup = moments.idx_tperp, moments.idx_uperp
    Mt = moments.mean[:, it]
    Mu = moments.mean[:, iu]
    Mtp = moments.mean[:, itp]
    Mup = moments.mean[:, iup]

    Stt, Suu = S[it, it], S[iu, iu]
    Stu = S[it, iu]
    Stptp, Supup = S[itp, itp], S[iup, iup]
    Stpt = S[itp, it]         # E[t_perp' t] summed
    Supu = S[iup, iu]

    Sxt = X.T @ Mt
    Sxtp = X.T @ Mtp
    Syu = Y.T @ Mu
    Syup = Y.T @ Mup

    W_prev, Wp_prev = theta_prev.W, theta_prev.W_perp
    C_prev, Cp_prev = theta_prev.C, theta_prev.C_perp

    W = _polar_factor(Sxt - Wp_prev @ Stpt)
    W_perp = _polar_factor(Sxtp - W @ Stpt.T) if moments.r_x else Wp_prev
    C = _polar_factor(Syu - Cp_prev @ Supu)
    C_perp = _polar_factor(Syup - C @ Supu.T) if moments.r_y else Cp_prev

    x_ss = float(np.sum(X * X))
    resid_x = (x_ss - 2.0 * float(np.sum(W * Sxt)) - 2.0 * float(np.sum(W_perp * Sxtp))
               + float(np.trace(Stt)) + float(np.trace(Stptp))
               + 2.0 * float(np.sum((W.T @ W_perp) * Stpt.T)))
    sigma_e2 = resid_x / (N * data.p)

    y_ss = float(np.sum(Y * Y))
    resid_y = (y_ss - 2.0 * float(np.sum(C * Syu)) - 2.0 * float(np.sum(C_perp * Syup))
               + float(np.trace(Suu)) + float(np.trace(Supup))
               + 2.0 * float(np.sum((C.T @ C_perp) * Supu.T)))
    sigma_f2 = resid_y / (N * data.q)

    bd = np.maximum(np.diag(Stu) / np.diag(Stt), 1e-8)
    sh = (np.diag(Suu) - 2.0 * bd * np.diag(Stu) + bd ** 2 * np.diag(Stt)) / N

    return {
        "W": W, "W_perp": W_perp, "C": C, "C_perp": C_perp,
        "B": bd,
        "Sigma_t": np.diag(Stt) / N,
        "Sigma_tperp": np.diag(Stptp) / N,
        "Sigma_h": sh,
        "Sigma_uperp": np.diag(Supup) / N,
        "sigma_e2": sigma_e2,
        "sigma_f2": sigma_f2,
    }


def _check_variance_floors(theta: Theta, iteration: int):
    checks = {"sigma_e2": theta.sigma_e2, "sigma_f2": theta.sigma_f2}
    if theta.family == GAUSSIAN:
        checks["sigma_g2"] = theta.sigma_g2
    for label, vec in (("Sigma_t", theta.Sigma_t), ("Sigma_h", theta.Sigma_h),
                       ("Sigma_tperp", theta.Sigma_tperp),
                       ("Sigma_uperp", theta.Sigma_uperp)):
        for j, v in enumerate(vec):
            checks[f"{label}[{j}]"] = float(v)
    for name, v in checks.items():
        if not v > VARIANCE_FLOOR:
            raise EstimationError(
                f"iteration {iteration}: {name} = {v:.3e} fell to or below "
                f"the variance floor {VARIANCE_FLOOR:.1e}")


def _rel_change(curr: float, prev: float) -> float:
    return abs(curr - prev) / max(abs(prev), np.finfo(np.float64).tiny)


def fit_gaussian(data: DataSet, dims: ModelDims,
                 config: FitConfig = FitConfig()) -> FitResult:
    """EM fit of the Gaussian-outcome model.

    Iterates exact conditional moments and closed-form block maximizers until
    the relative observed log-likelihood change falls below
    ``config.rel_tol`` or ``config.max_iter`` iterations have run.  The
    returned theta is canonicalized and ``final_moments`` is evaluated at it.
    """
    if data.family != GAUSSIAN:
        raise DataFormatError(f"fit_gaussian needs gaussian data, got family {data.family!r}")
    theta = init_params(data, dims, config)
    trace = []
    prev_ll = None
    converged = False
    iterations = 0

    for it in range(config.max_iter + 1):
        ll = log_likelihood_gaussian(theta, data)
        if not np.isfinite(ll):
            raise EstimationError(f"log-likelihood became non-finite at iteration {it}")
        trace.append(ll)
        if prev_ll is not None and _rel_change(ll, prev_ll) < config.rel_tol:
            converged = True
            break
        if it == config.max_iter:
            break
        prev_ll = ll
        moments = conditional_latent_moments(theta, data)
        a, b, sigma_g2 = m_step_outcome(moments, data.z, theta.B)
        blocks = m_step_po2pls_blocks(moments, data, theta)
        theta = replace(theta, a=a, b=b, sigma_g2=sigma_g2, **blocks)
        iterations = it + 1
        _check_variance_floors(theta, iterations)
        if config.canonicalize_each_iter:
            theta = canonicalize(theta)
        if iterations % 50 == 0:
            logger.debug("iteration %d: loglik %.6f", iterations, ll)

    theta = canonicalize(theta)
    final_moments = conditional_latent_moments(theta, data)
    loglik_trace = np.asarray(trace if config.trace_likelihood else trace[-1:])
    return FitResult(theta=theta, loglik_trace=loglik_trace,
                     iterations=iterations, converged=converged,
                     final_moments=final_moments)
