"""Shared test utilities: independent oracles written straight from the
generative equations.

Everything here deliberately avoids the package's covariance assembly and
conditioning code paths.  The central device is a linear map F from the
independent seed variables s = (t, t_perp, u_perp, h, e, f, g) to the
stacked vector (t, u, t_perp, u_perp, x, y, z); with D = Cov(s) diagonal,
Cov of the stack is F' D F, draws are (s @ F), and conditional moments
follow from the textbook partitioned-Gaussian formula via numpy solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from glmpo2pls import GAUSSIAN, BERNOULLI, DataSet, ModelDims, Theta, canonicalize


def make_theta(rng, p, q, r, rx, ry, family=GAUSSIAN, a_scale=1.0,
               b_scale=1.0, sigma_g2=1.0, canonical=True) -> Theta:
    """Random valid parameter set; loadings cross-orthogonal per block."""
    def ortho(n, k):
        Q, R = np.linalg.qr(rng.standard_normal((n, k)))
        return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))

    Qx = ortho(p, r + rx)
    Qy = ortho(q, r + ry)
    # strictly decreasing diag(Sigma_t B) so canonical order is unambiguous
    Sigma_t = 1.0 + rng.random(r) * 0.5 + 0.5 * np.arange(r, 0, -1)
    B = 0.5 + rng.random(r)
    order = np.argsort(-(Sigma_t * B), kind="stable")
    Sigma_t, B = Sigma_t[order], B[order]
    theta = Theta(
        W=Qx[:, :r], W_perp=Qx[:, r:], C=Qy[:, :r], C_perp=Qy[:, r:],
        B=B, Sigma_t=Sigma_t,
        Sigma_tperp=0.5 + rng.random(rx),
        Sigma_h=0.3 + rng.random(r),
        Sigma_uperp=0.5 + rng.random(ry),
        sigma_e2=0.2 + rng.random(), sigma_f2=0.2 + rng.random(),
        a=a_scale * rng.standard_normal(r),
        b=b_scale * rng.standard_normal(r),
        a0=0.0 if family == GAUSSIAN else float(rng.standard_normal() * 0.3),
        sigma_g2=sigma_g2 if family == GAUSSIAN else None,
        family=family)
    return canonicalize(theta) if canonical else theta


@dataclass(frozen=True)
class SeedMap:
    """Linear map from independent seeds to (t, u, t_perp, u_perp, x, y, z);
    the z column is the Gaussian-family linear part (a0 excluded)."""

    F: np.ndarray
    D: np.ndarray               # seed variances
    sl: dict                    # name -> column slice of the stacked output
    seed_sl: dict               # name -> column slice of the seed vector

    @property
    def cov(self) -> np.ndarray:
        return self.F.T @ (self.D[:, None] * self.F)


def seed_map(theta: Theta) -> SeedMap:
    p, q, r = theta.p, theta.q, theta.r
    rx, ry = theta.r_x, theta.r_y
    k = 2 * r + rx + ry
    n_seed = r + rx + ry + r + p + q + 1
    n_out = k + p + q + 1
    F = np.zeros((n_seed, n_out))
    D = np.zeros(n_seed)

    def spans(sizes):
        out, pos = {}, 0
        for name, size in sizes:
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    s_sl = spans([("t", r), ("tp", rx), ("up", ry), ("h", r),
                  ("e", p), ("f", q), ("g", 1)])
    o_sl = spans([("t", r), ("u", r), ("tp", rx), ("up", ry),
                  ("x", p), ("y", q), ("z", 1)])

    D[s_sl["t"]] = theta.Sigma_t
    D[s_sl["tp"]] = theta.Sigma_tperp
    D[s_sl["up"]] = theta.Sigma_uperp
    D[s_sl["h"]] = theta.Sigma_h
    D[s_sl["e"]] = theta.sigma_e2
    D[s_sl["f"]] = theta.sigma_f2
    D[s_sl["g"]] = theta.sigma_g2 if theta.sigma_g2 is not None else 0.0

    F[s_sl["t"], o_sl["t"]] = np.eye(r)
    F[s_sl["t"], o_sl["u"]] = np.diag(theta.B)
    F[s_sl["h"], o_sl["u"]] = np.eye(r)
    F[s_sl["tp"], o_sl["tp"]] = np.eye(rx)
    F[s_sl["up"], o_sl["up"]] = np.eye(ry)

    F[s_sl["t"], o_sl["x"]] = theta.W.T
    F[s_sl["tp"], o_sl["x"]] = theta.W_perp.T
    F[s_sl["e"], o_sl["x"]] = np.eye(p)

    F[s_sl["t"], o_sl["y"]] = np.diag(theta.B) @ theta.C.T
    F[s_sl["h"], o_sl["y"]] = theta.C.T
    F[s_sl["up"], o_sl["y"]] = theta.C_perp.T
    F[s_sl["f"], o_sl["y"]] = np.eye(q)

    F[s_sl["t"], o_sl["z"]] = theta.a[:, None]
    F[s_sl["h"], o_sl["z"]] = theta.b[:, None]
    F[s_sl["g"], o_sl["z"]] = 1.0
    return SeedMap(F=F, D=D, sl=o_sl, seed_sl=s_sl)


def draw_stack(theta: Theta, N: int, rng) -> tuple:
    """N draws of the stacked vector, plus the raw seeds (for reuse)."""
    sm = seed_map(theta)
    seeds = rng.standard_normal((N, sm.D.size)) * np.sqrt(sm.D)
    return seeds @ sm.F, sm


def draw_dataset(theta: Theta, N: int, rng) -> DataSet:
    """DataSet sampled from the generative equations (either family)."""
    stack, sm = draw_stack(theta, N, rng)
    X = stack[:, sm.sl["x"]]
    Y = stack[:, sm.sl["y"]]
    if theta.family == GAUSSIAN:
        z = stack[:, sm.sl["z"]].ravel()
    else:
        lin = theta.a0 + stack[:, sm.sl["z"]].ravel()   # g-variance is 0
        z = (rng.random(N) < expit(lin)).astype(np.float64)
    return DataSet(X=X, Y=Y, z=z, family=theta.family)


def cov_obs_oracle(theta: Theta, include_z: bool = True) -> np.ndarray:
    """Covariance of (x, y, z) (or (x, y)) straight from the seed map."""
    sm = seed_map(theta)
    full = sm.cov
    k = 2 * theta.r + theta.r_x + theta.r_y
    end = full.shape[0] if include_z else full.shape[0] - 1
    return full[k:end, k:end]


def conditional_oracle(theta: Theta, obs_rows: np.ndarray,
                       include_z: bool = True) -> tuple:
    """Textbook partitioned-Gaussian conditional (mean rows, covariance)
    of (t, u, t_perp, u_perp) given the observed rows."""
    sm = seed_map(theta)
    full = sm.cov
    k = 2 * theta.r + theta.r_x + theta.r_y
    end = full.shape[0] if include_z else full.shape[0] - 1
    S_oo = full[k:end, k:end]
    S_ol = full[k:end, :k]
    gain = np.linalg.solve(S_oo, S_ol)          # (obs, lat)
    mean = np.asarray(obs_rows) @ gain
    cond_cov = full[:k, :k] - S_ol.T @ gain
    return mean, 0.5 * (cond_cov + cond_cov.T)


def mvn_logpdf_rows(rows: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Dense zero-mean MVN log-density per row (scipy oracle)."""
    from scipy.stats import multivariate_normal

    return multivariate_normal(mean=np.zeros(cov.shape[0]), cov=cov,
                               allow_singular=False).logpdf(rows)


def latent_cov_oracle(theta: Theta) -> np.ndarray:
    """Prior covariance of nu = (t, u) from the equations."""
    r = theta.r
    St = np.diag(theta.Sigma_t)
    Bd = np.diag(theta.B)
    S = np.zeros((2 * r, 2 * r))
    S[:r, :r] = St
    S[:r, r:] = St @ Bd
    S[r:, :r] = Bd @ St
    S[r:, r:] = Bd @ St @ Bd + np.diag(theta.Sigma_h)
    return S


def xy_given_nu_covs(theta: Theta) -> tuple:
    """Dense conditional covariances of x given t and y given u."""
    Sx = theta.W_perp @ np.diag(theta.Sigma_tperp) @ theta.W_perp.T \
        + theta.sigma_e2 * np.eye(theta.p)
    Sy = theta.C_perp @ np.diag(theta.Sigma_uperp) @ theta.C_perp.T \
        + theta.sigma_f2 * np.eye(theta.q)
    return Sx, Sy


def binary_row_log_integrand(theta: Theta, x_row, y_row, z_val,
                             nu: np.ndarray) -> np.ndarray:
    """log p(z|nu) + log f(x|t) + log f(y|u) at prior draws nu (n, 2r),
    densities evaluated densely via scipy."""
    from scipy.stats import multivariate_normal

    r = theta.r
    t, u = nu[:, :r], nu[:, r:]
    h = u - t * theta.B
    lin = theta.a0 + t @ theta.a + h @ theta.b
    log_pz = log_expit(lin) if z_val == 1.0 else log_expit(-lin)
    Sx, Sy = xy_given_nu_covs(theta)
    mx = multivariate_normal(mean=np.zeros(theta.p), cov=Sx)
    my = multivariate_normal(mean=np.zeros(theta.q), cov=Sy)
    log_fx = mx.logpdf(x_row - t @ theta.W.T)
    log_fy = my.logpdf(y_row - u @ theta.C.T)
    return log_pz + log_fx + log_fy


def importance_posterior(theta: Theta, x_row, y_row, z_val, n_draws, rng):
    """Self-normalized importance sampling of the posterior of nu = (t, u)
    given one observation, proposal = prior.  Returns (mean, second_moment,
    mean_se) with per-coordinate standard errors of the posterior mean."""
    L = np.linalg.cholesky(latent_cov_oracle(theta))
    nu = rng.standard_normal((n_draws, 2 * theta.r)) @ L.T
    logw = binary_row_log_integrand(theta, x_row, y_row, z_val, nu)
    logw = logw - logw.max()
    w = np.exp(logw)
    w /= w.sum()
    mean = w @ nu
    second = (nu * w[:, None]).T @ nu
    dev = nu - mean
    mean_se = np.sqrt(np.sum((w[:, None] * dev) ** 2, axis=0))
    return mean, second, mean_se


def mc_binary_loglik_row(theta: Theta, x_row, y_row, z_val, n_draws, rng):
    """Monte-Carlo estimate of log integral p(z|nu) f(x|nu) f(y|nu) f(nu)
    dnu for one observation, with a delta-method standard error on the log
    scale."""
    L = np.linalg.cholesky(latent_cov_oracle(theta))
    nu = rng.standard_normal((n_draws, 2 * theta.r)) @ L.T
    logv = binary_row_log_integrand(theta, x_row, y_row, z_val, nu)
    shift = logv.max()
    vals = np.exp(logv - shift)
    mean = vals.mean()
    se = vals.std(ddof=1) / np.sqrt(n_draws)
    return shift + np.log(mean), se / mean


def gauss_moment_1d(k: int, var: float) -> float:
    """E[x^k] for x ~ N(0, var): odd k -> 0, even k -> var^{k/2} (k-1)!!."""
    if k % 2:
        return 0.0
    out = 1.0
    for m in range(k - 1, 0, -2):
        out *= m
    return out * var ** (k // 2)


def isserlis_moment(indices, S) -> float:
    """E[prod x_i] for zero-mean Gaussian x with covariance S, by explicit
    enumeration of pairings; indices is a tuple of coordinate labels."""
    if len(indices) == 0:
        return 1.0
    if len(indices) % 2:
        return 0.0
    first, rest = indices[0], list(indices[1:])
    total = 0.0
    for i, other in enumerate(rest):
        total += S[first, other] * isserlis_moment(
            tuple(rest[:i] + rest[i + 1:]), S)
    return total


def monomial_moment(powers, S) -> float:
    """E[prod x_j^{k_j}] under N(0, S) via Isserlis."""
    indices = []
    for j, k in enumerate(powers):
        indices.extend([j] * int(k))
    return isserlis_moment(tuple(indices), np.asarray(S))


# ---------------------------------------------------------------------------
# unconstrained parametrization for direct likelihood maximization oracles

def _sym_orth(Vflat, n, k):
    V = Vflat.reshape(n, k)
    U, _, Vt = np.linalg.svd(V, full_matrices=False)
    return U @ Vt


def free_vector_size(dims: ModelDims, family: str) -> int:
    p, q, r, rx, ry = dims.p, dims.q, dims.r, dims.r_x, dims.r_y
    base = p * r + p * rx + q * r + q * ry + r + rx + r + ry + 2 + r + 2 * r
    return base + 1            # + log sigma_g2 (gaussian) or a0 (binary)


def theta_from_free(vec: np.ndarray, dims: ModelDims, family: str) -> Theta:
    """Smooth surjective map from an unconstrained vector onto the
    constraint set (semi-orthogonal loadings via symmetric orthogonalization,
    positive scalars via exp)."""
    p, q, r, rx, ry = dims.p, dims.q, dims.r, dims.r_x, dims.r_y
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return out

    W = _sym_orth(take(p * r), p, r)
    W_perp = _sym_orth(take(p * rx), p, rx) if rx else np.zeros((p, 0))
    C = _sym_orth(take(q * r), q, r)
    C_perp = _sym_orth(take(q * ry), q, ry) if ry else np.zeros((q, 0))
    Sigma_t = np.exp(np.clip(take(r), -30, 30))
    Sigma_tperp = np.exp(np.clip(take(rx), -30, 30))
    Sigma_h = np.exp(np.clip(take(r), -30, 30))
    Sigma_uperp = np.exp(np.clip(take(ry), -30, 30))
    sigma_e2 = float(np.exp(np.clip(take(1), -30, 30)[0]))
    sigma_f2 = float(np.exp(np.clip(take(1), -30, 30)[0]))
    B = np.exp(np.clip(take(r), -30, 30))
    a = take(r).copy()
    b = take(r).copy()
    last = take(1)[0]
    if family == GAUSSIAN:
        sigma_g2, a0 = float(np.exp(np.clip(last, -30, 30))), 0.0
    else:
        sigma_g2, a0 = None, float(last)
    return Theta(W=W, W_perp=W_perp, C=C, C_perp=C_perp, B=B,
                 Sigma_t=Sigma_t, Sigma_tperp=Sigma_tperp, Sigma_h=Sigma_h,
                 Sigma_uperp=Sigma_uperp, sigma_e2=sigma_e2,
                 sigma_f2=sigma_f2, a=a, b=b, a0=a0, sigma_g2=sigma_g2,
                 family=family)


def direct_max_loglik(loglik_fn, data: DataSet, dims: ModelDims, family: str,
                      starts, maxiter=400) -> float:
    """Best log-likelihood found by a generic numerical optimizer over the
    unconstrained parametrization, across the given starting Thetas."""
    from scipy.optimize import minimize

    def objective(vec):
        try:
            th = theta_from_free(vec, dims, family)
            return -loglik_fn(th, data)
        except Exception:
            return 1e12

    best = -np.inf
    for th0 in starts:
        res = minimize(objective, free_from_theta(th0), method="L-BFGS-B",
                       options={"maxiter": maxiter, "maxfun": 20000})
        best = max(best, -res.fun)
    return best


def free_from_theta(theta: Theta) -> np.ndarray:
    """Left inverse of theta_from_free at interior points."""
    parts = [theta.W.ravel(), theta.W_perp.ravel(), theta.C.ravel(),
             theta.C_perp.ravel(), np.log(theta.Sigma_t),
             np.log(theta.Sigma_tperp), np.log(theta.Sigma_h),
             np.log(theta.Sigma_uperp), [np.log(theta.sigma_e2)],
             [np.log(theta.sigma_f2)], np.log(theta.B), theta.a, theta.b]
    if theta.family == GAUSSIAN:
        parts.append([np.log(theta.sigma_g2)])
    else:
        parts.append([theta.a0])
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in parts])
