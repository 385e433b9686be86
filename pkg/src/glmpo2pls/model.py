"""Core containers and Gaussian primitives for the joint two-block latent
factor model with an outcome.

The generative model for a row ``(x, y, z)`` with ``x`` (p features), ``y``
(q features) and scalar outcome ``z`` is

    x = t W' + t_perp W_perp' + e
    y = u C' + u_perp C_perp' + f
    u = t B + h
    eta(E[z | t, h]) = a0 + t a' + h b'

where ``t`` (r joint components), ``t_perp`` (r_x specific to x), ``u_perp``
(r_y specific to y) and ``h`` (r residual joint parts) are independent
zero-mean Gaussian rows with diagonal covariances, ``e``, ``f`` are isotropic
Gaussian noise, and ``eta`` is the identity link (Gaussian outcome,
``z = t a' + h b' + g`` with ``g ~ N(0, sigma_g2)``) or the logit link
(Bernoulli outcome).  The outcome coefficients are stored in the
reparametrized form in which the ``t`` coefficient already absorbs the
indirect ``t -> u`` path, so the linear predictor splits into independent
``t`` and ``h`` contributions.

Loadings are semi-orthogonal (``W'W = C'C = I_r`` etc.), the concatenations
``[W W_perp]`` and ``[C C_perp]`` have full column rank, ``diag(B) > 0`` and
``diag(Sigma_t B)`` is strictly decreasing; the model is then identifiable up
to joint sign flips of the components, which :func:`canonicalize` resolves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DataFormatError, DimensionMismatchError, NumericalDomainError

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
FAMILIES = (GAUSSIAN, BERNOULLI)

#: Hard floor for every variance parameter; values at or below are errors.
VARIANCE_FLOOR = 1e-10
#: Frobenius tolerance for the semi-orthogonality constraints.
ORTHONORMALITY_TOL = 1e-8


def _as_matrix(x, name):
    arr = np.array(x, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    return arr


def _as_vector(x, name):
    arr = np.array(x, dtype=np.float64, order="C")
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be a 1-d array, got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class ModelDims:
    """Problem dimensions: feature counts, component counts, sample size."""

    p: int
    q: int
    r: int
    r_x: int
    r_y: int
    N: int

    def __post_init__(self):
        for name in ("p", "q", "r", "N"):
            if getattr(self, name) < 1:
                raise DimensionMismatchError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("r_x", "r_y"):
            if getattr(self, name) < 0:
                raise DimensionMismatchError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.r + self.r_x > self.p:
            raise DimensionMismatchError(
                f"r + r_x = {self.r + self.r_x} exceeds p = {self.p}")
        if self.r + self.r_y > self.q:
            raise DimensionMismatchError(
                f"r + r_y = {self.r + self.r_y} exceeds q = {self.q}")

    @property
    def n_latent(self) -> int:
        """Length of the stacked latent row (t, u, t_perp, u_perp)."""
        return 2 * self.r + self.r_x + self.r_y


@dataclass(frozen=True)
class Theta:
    """Immutable parameter set of the joint model.

    ``B`` holds the diagonal of the joint-component coupling (u = t B + h) as
    a length-r vector; ``a`` and ``b`` are the outcome coefficients on t and
    h.  ``sigma_g2`` is the Gaussian outcome residual variance and must be
    None for the Bernoulli family; ``a0`` is the intercept, fixed at 0.0 for
    the Gaussian family (the outcome is centered).
    """

    W: np.ndarray
    W_perp: np.ndarray
    C: np.ndarray
    C_perp: np.ndarray
    B: np.ndarray
    Sigma_t: np.ndarray
    Sigma_tperp: np.ndarray
    Sigma_h: np.ndarray
    Sigma_uperp: np.ndarray
    sigma_e2: float
    sigma_f2: float
    a: np.ndarray
    b: np.ndarray
    a0: float = 0.0
    sigma_g2: Optional[float] = None
    family: str = GAUSSIAN

    def __post_init__(self):
        conv = {
            "W": _as_matrix(self.W, "W"),
            "W_perp": _as_matrix(self.W_perp, "W_perp"),
            "C": _as_matrix(self.C, "C"),
            "C_perp": _as_matrix(self.C_perp, "C_perp"),
            "B": _as_vector(self.B, "B"),
            "Sigma_t": _as_vector(self.Sigma_t, "Sigma_t"),
            "Sigma_tperp": _as_vector(self.Sigma_tperp, "Sigma_tperp"),
            "Sigma_h": _as_vector(self.Sigma_h, "Sigma_h"),
            "Sigma_uperp": _as_vector(self.Sigma_uperp, "Sigma_uperp"),
            "a": _as_vector(self.a, "a"),
            "b": _as_vector(self.b, "b"),
        }
        for name, arr in conv.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sigma_e2", float(self.sigma_e2))
        object.__setattr__(self, "sigma_f2", float(self.sigma_f2))
        object.__setattr__(self, "a0", float(self.a0))
        if self.sigma_g2 is not None:
            object.__setattr__(self, "sigma_g2", float(self.sigma_g2))
        self._check_shapes()

    def _check_shapes(self):
        if self.family not in FAMILIES:
            raise DataFormatError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        p, r = self.W.shape
        q = self.C.shape[0]
        r_x = self.W_perp.shape[1]
        r_y = self.C_perp.shape[1]
        problems = []
        if self.C.shape[1] != r:
            problems.append(f"C has {self.C.shape[1]} columns, W has {r}")
        if self.W_perp.shape[0] != p:
            problems.append(f"W_perp has {self.W_perp.shape[0]} rows, W has {p}")
        if self.C_perp.shape[0] != q:
            problems.append(f"C_perp has {self.C_perp.shape[0]} rows, C has {q}")
        for name, want in (("B", r), ("Sigma_t", r), ("Sigma_h", r), ("a", r), ("b", r),
                           ("Sigma_tperp", r_x), ("Sigma_uperp", r_y)):
            got = getattr(self, name).shape[0]
            if got != want:
                problems.append(f"{name} has length {got}, expected {want}")
        if problems:
            raise DimensionMismatchError("inconsistent Theta shapes: " + "; ".join(problems))
        if self.family == GAUSSIAN and self.sigma_g2 is None:
            raise DataFormatError("sigma_g2 is required for the gaussian family")
        if self.family == BERNOULLI and self.sigma_g2 is not None:
            raise DataFormatError("sigma_g2 must be None for the bernoulli family")

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def r(self) -> int:
        return self.W.shape[1]

    @property
    def r_x(self) -> int:
        return self.W_perp.shape[1]

    @property
    def r_y(self) -> int:
        return self.C_perp.shape[1]

    @property
    def Sigma_u(self) -> np.ndarray:
        """Implied diagonal of Var(u) = B Sigma_t B + Sigma_h."""
        return self.B ** 2 * self.Sigma_t + self.Sigma_h

    def dims(self, N: int) -> ModelDims:
        return ModelDims(self.p, self.q, self.r, self.r_x, self.r_y, N)


@dataclass(frozen=True)
class DataSet:
    """Row-aligned observed data: X (N x p), Y (N x q), z (N,)."""

    X: np.ndarray
    Y: np.ndarray
    z: np.ndarray
    family: str = GAUSSIAN

    def __post_init__(self):
        X = _as_matrix(self.X, "X")
        Y = _as_matrix(self.Y, "Y")
        z = _as_vector(self.z, "z")
        for name, arr in (("X", X), ("Y", Y), ("z", z)):
            if not np.isfinite(arr).all():
                raise DataFormatError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.family not in FAMILIES:
            raise DataFormatError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if X.shape[0] != Y.shape[0] or X.shape[0] != z.shape[0]:
            raise DimensionMismatchError(
                f"row counts differ: X has {X.shape[0]}, Y has {Y.shape[0]}, z has {z.shape[0]}")
        if X.shape[0] < 2:
            raise DataFormatError(f"need at least 2 rows, got {X.shape[0]}")
        if self.family == BERNOULLI:
            bad = np.flatnonzero((z != 0.0) & (z != 1.0))
            if bad.size:
                raise DataFormatError(
                    f"bernoulli outcome must be 0/1; first offending row {bad[0]} "
                    f"has z = {z[bad[0]]!r}")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    def dims(self, r: int, r_x: int, r_y: int) -> ModelDims:
        return ModelDims(self.p, self.q, r, r_x, r_y, self.N)


@dataclass(frozen=True)
class LatentMoments:
    """Conditional moments of the stacked latent row (t, u, t_perp, u_perp).

    ``mean`` holds per-observation conditional means (N x k).  For Gaussian
    conditioning the conditional covariance is data-independent and stored
    once in ``cov`` (k x k); paths where it varies per observation instead
    supply the summed second moment directly via ``second_moment``.
    """

    mean: np.ndarray
    r: int
    r_x: int
    r_y: int
    cov: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = _as_matrix(self.mean, "mean")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        k = 2 * self.r + self.r_x + self.r_y
        if mean.shape[1] != k:
            raise DimensionMismatchError(
                f"mean has {mean.shape[1]} columns, expected k = {k}")
        if (self.cov is None) == (self.second_moment is None):
            raise DimensionMismatchError(
                "exactly one of cov / second_moment must be provided")
        for name in ("cov", "second_moment"):
            val = getattr(self, name)
            if val is not None:
                arr = _as_matrix(val, name)
                if arr.shape != (k, k):
                    raise DimensionMismatchError(f"{name} must be {k} x {k}, got {arr.shape}")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.mean.shape[1]

    # Index helpers into the stacked latent order (t, u, t_perp, u_perp).
    @property
    def idx_t(self) -> slice:
        return slice(0, self.r)

    @property
    def idx_u(self) -> slice:
        return slice(self.r, 2 * self.r)

    @property
    def idx_tperp(self) -> slice:
        return slice(2 * self.r, 2 * self.r + self.r_x)

    @property
    def idx_uperp(self) -> slice:
        return slice(2 * self.r + self.r_x, self.k)

    def second_moment_sum(self) -> np.ndarray:
        """Sum over observations of E[lambda' lambda | data]."""
        if self.second_moment is not None:
            return self.second_moment
        return self.n * self.cov + self.mean.T @ self.mean


@dataclass(frozen=True)
class ConstraintViolation:
    """One violated model constraint with its measured deviation."""

    name: str
    deviation: float
    detail: str


def build_joint_covariance(theta: Theta) -> np.ndarray:
    """Covariance of the stacked observed row (x, y, z) implied by theta.

    Only defined for the Gaussian family (for a Bernoulli outcome the joint
    distribution of (x, y, z) is not Gaussian).  Returns an exactly symmetric
    (p+q+1) x (p+q+1) matrix.
    """
    if theta.family != GAUSSIAN:
        raise DataFormatError("joint covariance requires the gaussian family")
    p, q = theta.p, theta.q
    W, C = theta.W, theta.C
    st, sh, bd = theta.Sigma_t, theta.Sigma_h, theta.B
    su = theta.Sigma_u
    a, b = theta.a, theta.b

    S = np.empty((p + q + 1, p + q + 1))
    sl_x, sl_y, i_z = slice(0, p), slice(p, p + q), p + q

    Sxx = (W * st) @ W.T + (theta.W_perp * theta.Sigma_tperp) @ theta.W_perp.T
    Sxx[np.diag_indices_from(Sxx)] += theta.sigma_e2
    Syy = (C * su) @ C.T + (theta.C_perp * theta.Sigma_uperp) @ theta.C_perp.T
    Syy[np.diag_indices_from(Syy)] += theta.sigma_f2
    Sxy = (W * (st * bd)) @ C.T
    sxz = W @ (st * a)
    syz = C @ (bd * st * a + sh * b)
    szz = a @ (st * a) + b @ (sh * b) + theta.sigma_g2

    S[sl_x, sl_x] = Sxx
    S[sl_y, sl_y] = Syy
    S[sl_x, sl_y] = Sxy
    S[sl_y, sl_x] = Sxy.T
    S[sl_x, i_z] = sxz
    S[i_z, sl_x] = sxz
    S[sl_y, i_z] = syz
    S[i_z, sl_y] = syz
    S[i_z, i_z] = szz
    # force exact symmetry against accumulation-order effects in the GEMMs
    S = 0.5 * (S + S.T)
    return S


def _latent_prior_cov(theta: Theta) -> np.ndarray:
    """Prior covariance of (t, u, t_perp, u_perp); k x k."""
    r, r_x, r_y = theta.r, theta.r_x, theta.r_y
    k = 2 * r + r_x + r_y
    S = np.zeros((k, k))
    it, iu = slice(0, r), slice(r, 2 * r)
    itp = slice(2 * r, 2 * r + r_x)
    iup = slice(2 * r + r_x, k)
    S[it, it] = np.diag(theta.Sigma_t)
    S[iu, iu] = np.diag(theta.Sigma_u)
    cross = np.diag(theta.Sigma_t * theta.B)
    S[it, iu] = cross
    S[iu, it] = cross
    S[itp, itp] = np.diag(theta.Sigma_tperp)
    S[iup, iup] = np.diag(theta.Sigma_uperp)
    return S


def _obs_latent_cross(theta: Theta, include_z: bool) -> np.ndarray:
    """Cov((x, y[, z]), (t, u, t_perp, u_perp)); (p+q[+1]) x k."""
    p, q, r, r_x, r_y = theta.p, theta.q, theta.r, theta.r_x, theta.r_y
    k = 2 * r + r_x + r_y
    n_obs = p + q + (1 if include_z else 0)
    G = np.zeros((n_obs, k))
    st, sh, bd = theta.Sigma_t, theta.Sigma_h, theta.B
    su = theta.Sigma_u
    it, iu = slice(0, r), slice(r, 2 * r)
    itp = slice(2 * r, 2 * r + r_x)
    iup = slice(2 * r + r_x, k)
    G[:p, it] = theta.W * st
    G[:p, iu] = theta.W * (st * bd)
    G[:p, itp] = theta.W_perp * theta.Sigma_tperp
    G[p:p + q, it] = theta.C * (bd * st)
    G[p:p + q, iu] = theta.C * su
    G[p:p + q, iup] = theta.C_perp * theta.Sigma_uperp
    if include_z:
        G[p + q, it] = theta.a * st
        G[p + q, iu] = theta.a * st * bd + theta.b * sh
    return G


def _spd_factor(S: np.ndarray, context: str, theta: Theta):
    try:
        return cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        scales = {
            "sigma_e2": theta.sigma_e2,
            "sigma_f2": theta.sigma_f2,
            "min Sigma_t": float(np.min(theta.Sigma_t)),
            "min Sigma_h": float(np.min(theta.Sigma_h)),
        }
        if theta.sigma_g2 is not None:
            scales["sigma_g2"] = theta.sigma_g2
        worst = min(scales, key=scales.get)
        raise NumericalDomainError(
            f"{context}: covariance is not positive definite "
            f"(smallest parameter scale: {worst} = {scales[worst]:.3e})") from exc


def log_likelihood_gaussian(theta: Theta, data: DataSet) -> float:
    """Observed-data log-likelihood under the Gaussian-outcome model.

    Evaluated through a Cholesky factorization of the joint covariance; no
    explicit inverse is formed.
    """
    if data.p != theta.p or data.q != theta.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({data.p}, {data.q}); theta expects ({theta.p}, {theta.q})")
    S = build_joint_covariance(theta)
    factor = _spd_factor(S, "log_likelihood_gaussian", theta)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    obs = np.hstack([data.X, data.Y, data.z[:, None]])
    solved = cho_solve(factor, obs.T, check_finite=False)
    quad = float(np.einsum("ij,ji->", obs, solved))
    d = theta.p + theta.q + 1
    return -0.5 * (data.N * d * np.log(2.0 * np.pi) + data.N * logdet + quad)


def _condition_on(theta: Theta, obs: np.ndarray, include_z: bool) -> LatentMoments:
    S_obs = build_joint_covariance(theta) if include_z else _marginal_xy_covariance(theta)
    cross = _obs_latent_cross(theta, include_z)
    factor = _spd_factor(S_obs, "conditional moments", theta)
    K = cho_solve(factor, cross, check_finite=False)
    mean = obs @ K
    cond_cov = _latent_prior_cov(theta) - cross.T @ K
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return LatentMoments(mean=mean, r=theta.r, r_x=theta.r_x, r_y=theta.r_y, cov=cond_cov)


def _marginal_xy_covariance(theta: Theta) -> np.ndarray:
    """Covariance of (x, y) only; valid for both outcome families."""
    p, q = theta.p, theta.q
    W, C = theta.W, theta.C
    st, bd = theta.Sigma_t, theta.B
    S = np.empty((p + q, p + q))
    Sxx = (W * st) @ W.T + (theta.W_perp * theta.Sigma_tperp) @ theta.W_perp.T
    Sxx[np.diag_indices_from(Sxx)] += theta.sigma_e2
    Syy = (C * theta.Sigma_u) @ C.T + (theta.C_perp * theta.Sigma_uperp) @ theta.C_perp.T
    Syy[np.diag_indices_from(Syy)] += theta.sigma_f2
    Sxy = (W * (st * bd)) @ C.T
    S[:p, :p] = Sxx
    S[p:, p:] = Syy
    S[:p, p:] = Sxy
    S[p:, :p] = Sxy.T
    return 0.5 * (S + S.T)


def conditional_latent_moments(theta: Theta, data: DataSet) -> LatentMoments:
    """Conditional means and (shared) covariance of the latents given
    (x, y, z), by Gaussian conditioning on the joint covariance.

    Gaussian family only; the conditional covariance does not depend on the
    data and is stored once.
    """
    if theta.family != GAUSSIAN:
        raise DataFormatError("conditioning on (x, y, z) requires the gaussian family")
    if data.p != theta.p or data.q != theta.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({data.p}, {data.q}); theta expects ({theta.p}, {theta.q})")
    obs = np.hstack([data.X, data.Y, data.z[:, None]])
    return _condition_on(theta, obs, include_z=True)


def conditional_moments_given_xy(theta: Theta, X: np.ndarray, Y: np.ndarray) -> LatentMoments:
    """Conditional latent moments given (x, y) alone.

    Works for both families: the (x, y) marginal is Gaussian regardless of
    the outcome link.  Used for outcome prediction on new rows.
    """
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(
            f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if X.shape[1] != theta.p or Y.shape[1] != theta.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({X.shape[1]}, {Y.shape[1]}); "
            f"theta expects ({theta.p}, {theta.q})")
    return _condition_on(theta, np.hstack([X, Y]), include_z=False)


def predict_linear_predictor(theta: Theta, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Outcome linear predictor for new rows: a0 + E[t|x,y] a' + E[h|x,y] b'.

    For the Gaussian family this is the predicted centered outcome; for the
    Bernoulli family the predicted logit.
    """
    moments = conditional_moments_given_xy(theta, X, Y)
    Et = moments.mean[:, moments.idx_t]
    Eh = moments.mean[:, moments.idx_u] - Et * theta.B
    return theta.a0 + Et @ theta.a + Eh @ theta.b


def validate_constraints(theta: Theta, tol: float = ORTHONORMALITY_TOL) -> list[ConstraintViolation]:
    """Check every model constraint; returns a (possibly empty) report.

    Orthonormality deviations are measured in Frobenius norm against ``tol``;
    variances are checked against the hard floor of 1e-10.
    """
    out: list[ConstraintViolation] = []

    def ortho(M, name):
        if M.shape[1] == 0:
            return
        dev = float(np.linalg.norm(M.T @ M - np.eye(M.shape[1])))
        if dev > tol:
            out.append(ConstraintViolation(
                f"{name} semi-orthogonal", dev,
                f"||{name}'{name} - I||_F = {dev:.3e} exceeds {tol:.1e}"))

    ortho(theta.W, "W")
    ortho(theta.C, "C")
    ortho(theta.W_perp, "W_perp")
    ortho(theta.C_perp, "C_perp")

    for name, M in (("[W W_perp]", np.hstack([theta.W, theta.W_perp])),
                    ("[C C_perp]", np.hstack([theta.C, theta.C_perp]))):
        smin = float(np.linalg.svd(M, compute_uv=False)[-1])
        if smin <= 1e-10:
            out.append(ConstraintViolation(
                f"{name} full column rank", smin,
                f"smallest singular value {smin:.3e}"))

    variances = {
        "sigma_e2": theta.sigma_e2,
        "sigma_f2": theta.sigma_f2,
    }
    if theta.family == GAUSSIAN:
        variances["sigma_g2"] = theta.sigma_g2
    for label, vec in (("Sigma_t", theta.Sigma_t), ("Sigma_h", theta.Sigma_h),
                       ("Sigma_tperp", theta.Sigma_tperp), ("Sigma_uperp", theta.Sigma_uperp)):
        for j, v in enumerate(vec):
            variances[f"{label}[{j}]"] = float(v)
    for name, v in variances.items():
        if not v > VARIANCE_FLOOR:
            out.append(ConstraintViolation(
                f"{name} above variance floor", v,
                f"{name} = {v:.3e} is at or below {VARIANCE_FLOOR:.1e}"))

    for j, v in enumerate(theta.B):
        if not v > 0.0:
            out.append(ConstraintViolation(
                f"B[{j}] positive", float(v), f"B[{j}] = {v:.3e} is not > 0"))

    key = theta.Sigma_t * theta.B
    for j in range(theta.r - 1):
        if not key[j] > key[j + 1]:
            out.append(ConstraintViolation(
                "diag(Sigma_t B) strictly decreasing", float(key[j] - key[j + 1]),
                f"entries {j} and {j + 1} are {key[j]:.6g} and {key[j + 1]:.6g}"))
    return out


def _column_sign_fix(M: np.ndarray) -> np.ndarray:
    """Per-column sign s.t. the entry of largest absolute value is positive.

    Ties in |entry| resolve to the lowest row index (argmax convention).
    Zero columns get sign +1.
    """
    if M.shape[1] == 0:
        return np.ones(0)
    rows = np.argmax(np.abs(M), axis=0)
    lead = M[rows, np.arange(M.shape[1])]
    signs = np.where(lead < 0.0, -1.0, 1.0)
    return signs


def canonicalize(theta: Theta) -> Theta:
    """Resolve ordering and sign indeterminacy.

    Joint components are reordered by strictly decreasing ``diag(Sigma_t B)``
    (ties: larger ``Sigma_t`` first, then lower original index).  Each joint
    column whose largest-|entry| element of W is negative is flipped jointly
    in (W, C, a, b); specific columns of W_perp and C_perp are sign-fixed
    independently.  Idempotent, and leaves the likelihood unchanged.
    """
    key = theta.Sigma_t * theta.B
    order = sorted(range(theta.r),
                   key=lambda k: (-key[k], -theta.Sigma_t[k], k))
    order = np.asarray(order, dtype=int)

    W = theta.W[:, order].copy()
    C = theta.C[:, order].copy()
    a = theta.a[order].copy()
    b = theta.b[order].copy()
    bd = theta.B[order].copy()
    st = theta.Sigma_t[order].copy()
    sh = theta.Sigma_h[order].copy()

    signs = _column_sign_fix(W)
    W *= signs
    C *= signs
    a *= signs
    b *= signs

    W_perp = theta.W_perp * _column_sign_fix(theta.W_perp)
    C_perp = theta.C_perp * _column_sign_fix(theta.C_perp)

    return Theta(W=W, W_perp=W_perp, C=C, C_perp=C_perp, B=bd,
                 Sigma_t=st, Sigma_tperp=theta.Sigma_tperp.copy(),
                 Sigma_h=sh, Sigma_uperp=theta.Sigma_uperp.copy(),
                 sigma_e2=theta.sigma_e2, sigma_f2=theta.sigma_f2,
                 a=a, b=b, a0=theta.a0, sigma_g2=theta.sigma_g2,
                 family=theta.family)
