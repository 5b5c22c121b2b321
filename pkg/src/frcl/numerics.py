"""Dense linear-algebra and quadrature primitives.

Everything operates on float64 numpy arrays in row-major order. Kernel
matrices in this package stay small (a few hundred rows), so plain dense
routines are all we need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite, OrderOutOfRange

# Jitter escalation: start at JITTER_REL * mean(diag), multiply by 10 each
# retry, give up after MAX_JITTER_RETRIES.
JITTER_REL = 1e-10
MAX_JITTER_RETRIES = 6


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T = A + jitter_used * I."""

    L: np.ndarray
    jitter_used: float

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def logdet(self) -> float:
        """log det of the factored matrix (A + jitter_used * I)."""
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def cholesky(A: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric PSD matrix, escalating diagonal jitter on failure.

    Rank-deficient inputs (e.g. distilled covariances with more inducing
    points than features) are rescued by adding jitter; well-conditioned
    inputs factor exactly with jitter_used = 0.

    Raises NotPositiveDefinite if the factorisation still fails after the
    maximum jitter.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix contains non-finite entries")
    try:
        L = np.linalg.cholesky(A)
        return CholeskyFactor(L=L, jitter_used=0.0)
    except np.linalg.LinAlgError:
        pass
    base = JITTER_REL * max(float(np.mean(np.diag(A))), 1.0e-300)
    eye = np.eye(A.shape[0])
    jitter = base
    for _ in range(MAX_JITTER_RETRIES):
        try:
            L = np.linalg.cholesky(A + jitter * eye)
            return CholeskyFactor(L=L, jitter_used=jitter)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite(
        f"matrix of dim {A.shape[0]} not factorisable up to jitter {jitter / 10.0:g}"
    )


def tri_solve(factor: CholeskyFactor, B: np.ndarray, side: str = "lower") -> np.ndarray:
    """Solve L @ X = B (side='lower') or L.T @ X = B (side='lower-transposed')."""
    L = factor.L
    B = np.asarray(B, dtype=np.float64)
    rows = B.shape[0]
    if rows != L.shape[0]:
        raise DimensionMismatch(f"L is {L.shape[0]}x{L.shape[0]}, B has {rows} rows")
    # check_finite off: inputs come from our own factorisations, and NaN
    # divergence is detected at the objective level instead
    if side == "lower":
        return scipy.linalg.solve_triangular(L, B, lower=True, check_finite=False)
    if side == "lower-transposed":
        return scipy.linalg.solve_triangular(L, B, lower=True, trans="T", check_finite=False)
    raise ValueError(f"unknown side {side!r}")


def chol_solve(factor: CholeskyFactor, B: np.ndarray) -> np.ndarray:
    """Solve (L @ L.T) @ X = B by two triangular solves."""
    return tri_solve(factor, tri_solve(factor, B, "lower"), "lower-transposed")


@dataclass(frozen=True)
class QuadratureRule:
    """Physicists' Gauss-Hermite rule: weights sum to sqrt(pi).

    E_{N(m,v)}[g(f)] ~= (1/sqrt(pi)) * sum_j weights[j] * g(m + sqrt(2v) * nodes[j])
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return len(self.nodes)


def gauss_hermite(order: int) -> QuadratureRule:
    """Return the Gauss-Hermite rule of the given order (1..64)."""
    if not 1 <= order <= 64:
        raise OrderOutOfRange(f"order must be in [1, 64], got {order}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    return QuadratureRule(nodes=nodes, weights=weights)


def gaussian_expectation(rule: QuadratureRule, g, m, v):
    """Quadrature estimate of E_{f~N(m,v)}[g(f)]; m, v may be arrays.

    g must accept the broadcasted array of evaluation points.
    """
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    f = m[..., None] + np.sqrt(2.0 * v)[..., None] * rule.nodes
    return (g(f) @ rule.weights) / np.sqrt(np.pi)
