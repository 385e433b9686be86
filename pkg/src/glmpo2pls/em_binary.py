"""EM estimation for the Bernoulli-outcome model.

The observed likelihood integrates the logistic outcome factor against the
joint-latent prior; after factorizing out the specific components the
integral is 2r-dimensional and is evaluated with a tensor Gauss-Hermite grid
adapted to the prior covariance of (t, u).  Conditional on a grid point and
the data, the specific components are Gaussian with closed-form moments, so
the structural M-step blocks reuse the Gaussian machinery on reconstructed
full-latent moments.  The outcome coefficients beta = (a0, a, b) take one
Armijo-damped gradient ascent step on their expected-complete-likelihood
term per EM iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import DataFormatError, DimensionMismatchError, EstimationError
from .em_gaussian import (
    FitConfig,
    FitResult,
    _check_variance_floors,
    _rel_change,
    init_params,
    m_step_po2pls_blocks,
)
from .model import BERNOULLI, DataSet, LatentMoments, ModelDims, Theta, canonicalize
from .quadrature import (
    DEFAULT_POINT_BUDGET,
    QuadratureGrid,
    build_grid,
    latent_joint_covariance,
)

#: Quadrature nodes per latent dimension unless the caller overrides.
DEFAULT_QUAD_NODES = 16

#: Keep the N x M^(2r) posterior weight matrix only below this element count.
_WEIGHT_STORE_LIMIT = 1 << 24

_ARMIJO_SHRINK = 0.8
_ARMIJO_SLOPE = 0.5
_ARMIJO_MIN_STEP = 1e-12


@dataclass(frozen=True)
class SufficientStats:
    """Posterior quantities from one quadrature E-step.

    ``class_weights`` row 0/1 holds, per grid point, the posterior weight
    summed over observations with z = 0 / z = 1; these are all the outcome
    block needs.  ``post_weights`` is the full per-observation weight matrix
    when small enough to keep, else None.  ``moments`` carries reconstructed
    full-latent (t, u, t_perp, u_perp) conditional moments for the
    structural M-step blocks.
    """

    grid: QuadratureGrid
    t_grid: np.ndarray
    u_grid: np.ndarray
    h_grid: np.ndarray
    loglik: float
    log_norms: np.ndarray
    nu_mean: np.ndarray
    nu_second: np.ndarray
    class_weights: np.ndarray
    moments: LatentMoments
    post_weights: Optional[np.ndarray] = None


def _pack_beta(theta: Theta) -> np.ndarray:
    return np.concatenate([[theta.a0], theta.a, theta.b])


def _unpack_beta(beta: np.ndarray, r: int):
    return float(beta[0]), beta[1:1 + r], beta[1 + r:]


def conditional_prob_z(theta: Theta, nu: np.ndarray, z) -> np.ndarray:
    """P(z | nu) under the logistic link, with nu = (t, u) rows.

    ``nu`` may be a single length-2r point or an array of rows; ``z`` is 0 or
    1 (scalar or per-row).  Uses log-space sigmoids, so extreme linear
    predictors round to 0 or 1 without overflow.
    """
    nu = np.asarray(nu, dtype=np.float64)
    single = nu.ndim == 1
    pts = np.atleast_2d(nu)
    r = theta.r
    if pts.shape[1] != 2 * r:
        raise DimensionMismatchError(
            f"nu has {pts.shape[1]} columns, expected 2r = {2 * r}")
    z_arr = np.asarray(z, dtype=np.float64)
    if not np.all((z_arr == 0.0) | (z_arr == 1.0)):
        raise DataFormatError(f"z must be 0 or 1, got {z!r}")
    t = pts[:, :r]
    h = pts[:, r:] - t * theta.B
    lin = theta.a0 + t @ theta.a + h @ theta.b
    # log P(z=1) = log_expit(lin), log P(z=0) = log_expit(-lin)
    sign = np.where(z_arr == 1.0, 1.0, -1.0)
    prob = np.exp(log_expit(sign * lin))
    return float(prob[0]) if single and prob.ndim == 1 and prob.size == 1 else prob


class _GridDensities:
    """Per-(observation, grid point) log densities and specific-component
    posterior pieces, computed in row chunks to bound memory."""

    def __init__(self, theta: Theta, data: DataSet, grid: QuadratureGrid):
        self.theta = theta
        self.data = data
        self.grid = grid
        r = theta.r
        self.t_g = grid.points[:, :r]
        self.u_g = grid.points[:, r:]
        self.h_g = self.u_g - self.t_g * theta.B

        X, Y = data.X, data.Y
        self.xw = X @ theta.W
        self.xwp = X @ theta.W_perp
        self.yc = Y @ theta.C
        self.ycp = Y @ theta.C_perp
        self.x_sq = np.einsum("ij,ij->i", X, X)
        self.y_sq = np.einsum("ij,ij->i", Y, Y)
        self.tG_x = self.t_g @ (theta.W.T @ theta.W_perp)
        self.uG_y = self.u_g @ (theta.C.T @ theta.C_perp)
        WtW = theta.W.T @ theta.W
        CtC = theta.C.T @ theta.C
        self.tquad = np.einsum("mi,ij,mj->m", self.t_g, WtW, self.t_g)
        self.uquad = np.einsum("mi,ij,mj->m", self.u_g, CtC, self.u_g)

        se2, sf2 = theta.sigma_e2, theta.sigma_f2
        dx, dy = theta.Sigma_tperp, theta.Sigma_uperp
        self.gamma_x = dx / (dx + se2)
        self.gamma_y = dy / (dy + sf2)
        p, q = theta.p, theta.q
        self.logdet_x = (p - theta.r_x) * np.log(se2) + float(np.sum(np.log(se2 + dx)))
        self.logdet_y = (q - theta.r_y) * np.log(sf2) + float(np.sum(np.log(sf2 + dy)))
        self.const_x = -0.5 * (p * np.log(2.0 * np.pi) + self.logdet_x)
        self.const_y = -0.5 * (q * np.log(2.0 * np.pi) + self.logdet_y)
        # conditional covariance diagonals of t_perp | (x, t) and u_perp | (y, u)
        self.vtp = se2 * self.gamma_x
        self.vup = sf2 * self.gamma_y

        lin = theta.a0 + self.t_g @ theta.a + self.h_g @ theta.b
        self.log_pz1 = log_expit(lin)
        self.log_pz0 = log_expit(-lin)

    def chunk_rows(self, sl: slice):
        """Log joint density pieces and residual projections for data rows
        in ``sl``; returns (log_joint, resid_wp, resid_cp)."""
        th = self.theta
        z = self.data.z[sl]
        # x | t
        resid_wp = self.xwp[sl, None, :] - self.tG_x[None, :, :]
        quad_x = (self.x_sq[sl, None] - 2.0 * self.xw[sl] @ self.t_g.T
                  + self.tquad[None, :])
        if th.r_x:
            quad_x = quad_x - np.einsum("imj,imj->im", resid_wp,
                                        resid_wp * self.gamma_x)
        log_fx = self.const_x - 0.5 * quad_x / th.sigma_e2
        # y | u
        resid_cp = self.ycp[sl, None, :] - self.uG_y[None, :, :]
        quad_y = (self.y_sq[sl, None] - 2.0 * self.yc[sl] @ self.u_g.T
                  + self.uquad[None, :])
        if th.r_y:
            quad_y = quad_y - np.einsum("imj,imj->im", resid_cp,
                                        resid_cp * self.gamma_y)
        log_fy = self.const_y - 0.5 * quad_y / th.sigma_f2
        log_pz = np.where(z[:, None] == 1.0, self.log_pz1[None, :],
                          self.log_pz0[None, :])
        log_joint = self.grid.log_weights[None, :] + log_pz + log_fx + log_fy
        return log_joint, resid_wp, resid_cp


def _chunk_size(n_points: int, widths) -> int:
    per_row = n_points * max(1, max(widths))
    return max(1, int(4_000_000 // per_row))


def log_likelihood_binary(theta: Theta, data: DataSet,
                          M: int = DEFAULT_QUAD_NODES,
                          budget: int = DEFAULT_POINT_BUDGET) -> float:
    """Quadrature approximation of the observed log-likelihood under the
    Bernoulli-outcome model."""
    _check_binary_inputs(theta, data)
    grid = build_grid(latent_joint_covariance(theta.Sigma_t, theta.Sigma_h, theta.B),
                      M, budget)
    dens = _GridDensities(theta, data, grid)
    total = 0.0
    step = _chunk_size(grid.n_points, (theta.r_x, theta.r_y, 2 * theta.r))
    for start in range(0, data.N, step):
        sl = slice(start, min(start + step, data.N))
        log_joint, _, _ = dens.chunk_rows(sl)
        log_norms = logsumexp(log_joint, axis=1)
        _check_norms(log_norms, start)
        total += float(np.sum(log_norms))
    return total


def _check_norms(log_norms: np.ndarray, offset: int):
    bad = np.flatnonzero(~np.isfinite(log_norms))
    if bad.size:
        raise EstimationError(
            f"posterior weights underflowed to zero for observation "
            f"{offset + bad[0]}; the current parameters place the data "
            f"outside the quadrature grid's reach")


def _check_binary_inputs(theta: Theta, data: DataSet):
    if theta.family != BERNOULLI or data.family != BERNOULLI:
        raise DataFormatError(
            f"binary path needs bernoulli theta and data, got theta family "
            f"{theta.family!r} and data family {data.family!r}")
    if data.p != theta.p or data.q != theta.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({data.p}, {data.q}); theta expects ({theta.p}, {theta.q})")


def e_step_binary(theta: Theta, data: DataSet, M: int = DEFAULT_QUAD_NODES,
                  budget: int = DEFAULT_POINT_BUDGET) -> SufficientStats:
    """Posterior moments of all latents given the data, on the tensor grid.

    Produces per-observation moments of nu = (t, u), the class-aggregated
    grid weights for the outcome block, and reconstructed full-latent
    moments (specific components handled by exact Gaussian conditioning at
    each grid point, averaged under the posterior weights).
    """
    _check_binary_inputs(theta, data)
    grid = build_grid(latent_joint_covariance(theta.Sigma_t, theta.Sigma_h, theta.B),
                      M, budget)
    dens = _GridDensities(theta, data, grid)
    N = data.N
    r, r_x, r_y = theta.r, theta.r_x, theta.r_y
    k = 2 * r + r_x + r_y
    Mg = grid.n_points
    nu_g = grid.points

    keep = N * Mg <= _WEIGHT_STORE_LIMIT
    post_weights = np.empty((N, Mg)) if keep else None

    log_norms = np.empty(N)
    nu_mean = np.empty((N, 2 * r))
    nu_second = np.empty((N, 2 * r, 2 * r))
    mean_full = np.empty((N, k))
    wtot = np.zeros(Mg)
    class_weights = np.zeros((2, Mg))
    S_nu_tp = np.zeros((2 * r, r_x))
    S_nu_up = np.zeros((2 * r, r_y))
    S_tp_tp = np.zeros((r_x, r_x))
    S_up_up = np.zeros((r_y, r_y))
    S_tp_up = np.zeros((r_x, r_y))

    z = data.z
    step = _chunk_size(Mg, (r_x, r_y, 2 * r))
    for start in range(0, N, step):
        sl = slice(start, min(start + step, N))
        log_joint, resid_wp, resid_cp = dens.chunk_rows(sl)
        ln = logsumexp(log_joint, axis=1)
        _check_norms(ln, start)
        log_norms[sl] = ln
        w = np.exp(log_joint - ln[:, None])
        if keep:
            post_weights[sl] = w

        nu_mean[sl] = w @ nu_g
        nu_second[sl] = np.einsum("im,mj,mk->ijk", w, nu_g, nu_g)
        wtot += w.sum(axis=0)
        zc = z[sl]
        class_weights[0] += w[zc == 0.0].sum(axis=0)
        class_weights[1] += w[zc == 1.0].sum(axis=0)

        m_tp = resid_wp * dens.gamma_x      # E[t_perp | x, t] per (row, point)
        m_up = resid_cp * dens.gamma_y
        mean_full[sl, :2 * r] = nu_mean[sl]
        mean_full[sl, 2 * r:2 * r + r_x] = np.einsum("im,imj->ij", w, m_tp)
        mean_full[sl, 2 * r + r_x:] = np.einsum("im,imj->ij", w, m_up)
        if r_x:
            S_nu_tp += np.einsum("im,mj,imk->jk", w, nu_g, m_tp)
            S_tp_tp += np.einsum("im,imj,imk->jk", w, m_tp, m_tp)
        if r_y:
            S_nu_up += np.einsum("im,mj,imk->jk", w, nu_g, m_up)
            S_up_up += np.einsum("im,imj,imk->jk", w, m_up, m_up)
        if r_x and r_y:
            S_tp_up += np.einsum("im,imj,imk->jk", w, m_tp, m_up)

    S = np.zeros((k, k))
    i_nu = slice(0, 2 * r)
    itp = slice(2 * r, 2 * r + r_x)
    iup = slice(2 * r + r_x, k)
    S[i_nu, i_nu] = np.einsum("m,mj,mk->jk", wtot, nu_g, nu_g)
    S[i_nu, itp] = S_nu_tp
    S[itp, i_nu] = S_nu_tp.T
    S[i_nu, iup] = S_nu_up
    S[iup, i_nu] = S_nu_up.T
    S[itp, itp] = S_tp_tp + N * np.diag(dens.vtp)
    S[iup, iup] = S_up_up + N * np.diag(dens.vup)
    S[itp, iup] = S_tp_up
    S[iup, itp] = S_tp_up.T
    S = 0.5 * (S + S.T)

    moments = LatentMoments(mean=mean_full, r=r, r_x=r_x, r_y=r_y, second_moment=S)
    return SufficientStats(
        grid=grid, t_grid=dens.t_g, u_grid=dens.u_g, h_grid=dens.h_g,
        loglik=float(np.sum(log_norms)), log_norms=log_norms,
        nu_mean=nu_mean, nu_second=nu_second, class_weights=class_weights,
        moments=moments, post_weights=post_weights)


def _beta_linear_predictor(beta: np.ndarray, stats: SufficientStats) -> np.ndarray:
    r = stats.grid.r
    a0, a, b = _unpack_beta(beta, r)
    return a0 + stats.t_grid @ a + stats.h_grid @ b


def q_beta(beta: np.ndarray, theta: Theta, data: DataSet,
           stats: SufficientStats) -> float:
    """Expected complete-data outcome term sum_i E[log P(z_i | nu) | data]
    evaluated on the posterior grid weights."""
    beta = np.asarray(beta, dtype=np.float64)
    lin = _beta_linear_predictor(beta, stats)
    cw0, cw1 = stats.class_weights
    return float(cw1 @ log_expit(lin) + cw0 @ log_expit(-lin))


def grad_q_beta(beta: np.ndarray, theta: Theta, data: DataSet,
                stats: SufficientStats) -> np.ndarray:
    """Gradient of :func:`q_beta` in beta = (a0, a, b)."""
    beta = np.asarray(beta, dtype=np.float64)
    lin = _beta_linear_predictor(beta, stats)
    sig = expit(lin)
    cw0, cw1 = stats.class_weights
    coef = cw1 * (1.0 - sig) - cw0 * sig     # posterior-weighted (z - sigma)
    return np.concatenate([[coef.sum()],
                           coef @ stats.t_grid,
                           coef @ stats.h_grid])


def _backtrack(q_fn, beta: np.ndarray, grad: np.ndarray):
    """Armijo backtracking ascent step along ``grad``.

    Starts at step 1 and shrinks by 0.8 until
    ``q(beta + s grad) >= q(beta) + 0.5 s ||grad||^2``; a step below 1e-12
    returns beta unchanged with the warning flag set.
    """
    q0 = q_fn(beta)
    gg = float(grad @ grad)
    s = 1.0
    while q_fn(beta + s * grad) < q0 + _ARMIJO_SLOPE * s * gg:
        s *= _ARMIJO_SHRINK
        if s < _ARMIJO_MIN_STEP:
            return beta, True
    return beta + s * grad, False


def armijo_update(beta: np.ndarray, theta: Theta, data: DataSet,
                  stats: SufficientStats):
    """One damped gradient ascent step on the outcome block.

    Returns ``(beta_new, warned)``; ``q_beta`` never decreases.
    """
    beta = np.asarray(beta, dtype=np.float64)
    grad = grad_q_beta(beta, theta, data, stats)
    return _backtrack(lambda bb: q_beta(bb, theta, data, stats), beta, grad)


def fit_binary(data: DataSet, dims: ModelDims, config: FitConfig = FitConfig(),
               M: int = DEFAULT_QUAD_NODES,
               budget: int = DEFAULT_POINT_BUDGET) -> FitResult:
    """EM fit of the Bernoulli-outcome model with an M-node tensor grid.

    Each iteration runs the quadrature E-step, one Armijo gradient step on
    (a0, a, b) and the closed-form structural block updates.  Convergence is
    declared on the relative change of the quadrature observed
    log-likelihood.  The returned theta is canonicalized with
    ``final_moments`` evaluated at it.
    """
    if data.family != BERNOULLI:
        raise DataFormatError(f"fit_binary needs bernoulli data, got family {data.family!r}")
    theta = init_params(data, dims, config)
    trace = []
    prev_ll = None
    converged = False
    iterations = 0
    warned_any = False

    for it in range(config.max_iter + 1):
        stats = e_step_binary(theta, data, M, budget)
        ll = stats.loglik
        if not np.isfinite(ll):
            raise EstimationError(f"log-likelihood became non-finite at iteration {it}")
        trace.append(ll)
        if prev_ll is not None and _rel_change(ll, prev_ll) < config.rel_tol:
            converged = True
            break
        if it == config.max_iter:
            break
        prev_ll = ll
        beta_new, warned = armijo_update(_pack_beta(theta), theta, data, stats)
        warned_any = warned_any or warned
        a0, a, b = _unpack_beta(beta_new, theta.r)
        blocks = m_step_po2pls_blocks(stats.moments, data, theta)
        theta = replace(theta, a0=a0, a=a, b=b, **blocks)
        iterations = it + 1
        _check_variance_floors(theta, iterations)
        if config.canonicalize_each_iter:
            theta = canonicalize(theta)

    theta = canonicalize(theta)
    final_stats = e_step_binary(theta, data, M, budget)
    loglik_trace = np.asarray(trace if config.trace_likelihood else trace[-1:])
    return FitResult(theta=theta, loglik_trace=loglik_trace,
                     iterations=iterations, converged=converged,
                     final_moments=final_stats.moments,
                     beta_step_warning=warned_any)
