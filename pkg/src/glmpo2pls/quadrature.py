"""Gauss-Hermite quadrature (physicists' convention) and tensor grids.

The one-dimensional rule integrates against the weight ``exp(-x^2)``; nodes
and weights come from the symmetric tridiagonal Jacobi matrix (zero diagonal,
off-diagonal ``sqrt(k/2)``), whose eigenvalues are the nodes and whose first
eigenvector components squared, times ``sqrt(pi)``, are the weights.

For a zero-mean Gaussian with covariance ``Sigma`` the tensor-product rule
turns ``E[g(nu)]`` into ``sum_m wnorm_m g(point_m)`` with normalized weights
``wnorm = prod(w) / pi^(d/2)`` and ``point_m = sqrt(2) * node_m @ R`` where
``R'R = Sigma`` (upper Cholesky factor).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, eigh_tridiagonal

from .errors import (
    DataFormatError,
    DimensionMismatchError,
    GridBudgetError,
    NumericalDomainError,
)

#: Default cap on the number of tensor grid points.
DEFAULT_POINT_BUDGET = 1_000_000


@dataclass(frozen=True)
class HermiteRule:
    """One-dimensional Gauss-Hermite rule: nodes ascending, weights > 0,
    weights summing to sqrt(pi)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def M(self) -> int:
        return self.nodes.shape[0]


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product grid over the 2r joint latents (t, u).

    ``points`` is (M^(2r)) x 2r after the covariance transformation;
    ``log_weights`` holds the log of the normalized weights, which sum to 1.
    """

    points: np.ndarray
    log_weights: np.ndarray
    M: int
    r: int

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def gauss_hermite_rule(M: int) -> HermiteRule:
    """Nodes and weights of the M-point physicists' Gauss-Hermite rule.

    Exact for polynomials of degree <= 2M - 1 against exp(-x^2).  The rule is
    symmetrized so that nodes come in exact +/- pairs (odd M has an exact 0).
    """
    if not 1 <= M <= 50:
        raise DataFormatError(f"M must be in [1, 50], got {M}")
    if M == 1:
        return HermiteRule(nodes=np.zeros(1), weights=np.array([np.sqrt(np.pi)]))
    off = np.sqrt(np.arange(1, M) / 2.0)
    vals, vecs = eigh_tridiagonal(np.zeros(M), off)
    order = np.argsort(vals)
    nodes = vals[order]
    weights = np.sqrt(np.pi) * vecs[0, order] ** 2
    # enforce the +/- symmetry of the rule exactly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return HermiteRule(nodes=nodes, weights=weights)


def build_grid(Sigma_nu: np.ndarray, M: int,
               budget: int = DEFAULT_POINT_BUDGET) -> QuadratureGrid:
    """Tensor grid adapted to the joint-latent covariance ``Sigma_nu``.

    ``Sigma_nu`` is the 2r x 2r prior covariance of (t, u).  Raises a
    :class:`GridBudgetError` when M^(2r) would exceed ``budget`` (the grid
    grows as O(M^(2r)); reduce M or r).
    """
    Sigma_nu = np.asarray(Sigma_nu, dtype=np.float64)
    if Sigma_nu.ndim != 2 or Sigma_nu.shape[0] != Sigma_nu.shape[1]:
        raise DimensionMismatchError(f"Sigma_nu must be square, got {Sigma_nu.shape}")
    d = Sigma_nu.shape[0]
    if d % 2 != 0 or d == 0:
        raise DimensionMismatchError(f"Sigma_nu must be 2r x 2r with r >= 1, got d = {d}")
    r = d // 2
    n_points = M ** d
    if n_points > budget:
        raise GridBudgetError(
            f"grid would need M^(2r) = {M}^{d} = {n_points} points, over the "
            f"budget of {budget}; the grid grows as O(M^(2r)), so reduce M or "
            f"the number of joint components")
    rule = gauss_hermite_rule(M)
    try:
        R = cholesky(Sigma_nu, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError(
            "joint-latent covariance is not positive definite; check Sigma_t, "
            "Sigma_h and B") from exc

    base = np.array(list(itertools.product(range(M), repeat=d)), dtype=int)
    nodes = rule.nodes[base]                      # (n_points, d) standard nodes
    log_w1 = np.log(rule.weights) - 0.5 * np.log(np.pi)
    log_weights = log_w1[base].sum(axis=1)
    points = np.sqrt(2.0) * nodes @ R
    return QuadratureGrid(points=points, log_weights=log_weights, M=M, r=r)


def latent_joint_covariance(Sigma_t: np.ndarray, Sigma_h: np.ndarray,
                            B: np.ndarray) -> np.ndarray:
    """Prior covariance of (t, u) with u = t B + h; 2r x 2r."""
    r = Sigma_t.shape[0]
    S = np.zeros((2 * r, 2 * r))
    S[:r, :r] = np.diag(Sigma_t)
    S[:r, r:] = np.diag(Sigma_t * B)
    S[r:, :r] = np.diag(Sigma_t * B)
    S[r:, r:] = np.diag(B ** 2 * Sigma_t + Sigma_h)
    return S
