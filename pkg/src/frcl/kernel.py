"""Linear GP kernel induced by the feature network.

k(x, x') = sigma_w2 * phi(x)^T phi(x'), the covariance obtained by placing a
N(0, sigma_w2 I) prior on the last-layer weights. Gram matrices are dense and
small (inducing sets of at most a few hundred points).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import features
from .errors import DimensionMismatch
from .numerics import CholeskyFactor, cholesky, tri_solve

log = logging.getLogger(__name__)

# Residuals are mathematically >= 0; anything this far below zero means
# numerical trouble worth logging (still clamped, not an error).
RESIDUAL_CLAMP = -1e-8


@dataclass(frozen=True)
class KernelConfig:
    """Prior weight variance sigma_w2; fixed to 1 in all experiments."""

    sigma_w2: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma_w2) and self.sigma_w2 > 0):
            raise ValueError(f"sigma_w2 must be finite and positive, got {self.sigma_w2}")


@dataclass(frozen=True)
class KernelWorkspace:
    """Gram matrix on one inducing set plus its Cholesky factor.

    K_Z = sigma_w2 * Phi_Z @ Phi_Z.T (+ jitter on the diagonal inside chol_KZ).
    Immutable; safe to share across concurrent evaluations.
    """

    K_Z: np.ndarray
    chol_KZ: CholeskyFactor
    Phi_Z: np.ndarray
    sigma_w2: float


def gram(
    net: features.FeatureNet,
    config: KernelConfig,
    A: np.ndarray,
    B: np.ndarray | None = None,
    phi_A: np.ndarray | None = None,
    phi_B: np.ndarray | None = None,
) -> np.ndarray:
    """Kernel matrix with entry (j, l) = sigma_w2 * <phi(a_j), phi(b_l)>.

    Precomputed feature matrices can be passed to avoid redundant forward
    passes (selection search evaluates thousands of candidate sets against
    fixed features).
    """
    Phi_A = features.forward(net, A) if phi_A is None else phi_A
    if B is None and phi_B is None:
        Phi_B = Phi_A
    else:
        Phi_B = features.forward(net, B) if phi_B is None else phi_B
    return config.sigma_w2 * (Phi_A @ Phi_B.T)


def gram_diag(
    net: features.FeatureNet,
    config: KernelConfig,
    X: np.ndarray,
    phi_X: np.ndarray | None = None,
) -> np.ndarray:
    """diag of gram(X, X) without forming the full matrix."""
    Phi = features.forward(net, X) if phi_X is None else phi_X
    return config.sigma_w2 * np.einsum("ij,ij->i", Phi, Phi)


def build_workspace(
    net: features.FeatureNet,
    config: KernelConfig,
    Z: np.ndarray,
    phi_Z: np.ndarray | None = None,
    jitter_floor: float = 0.0,
) -> KernelWorkspace:
    """Evaluate K_Z at the current parameters and factor it.

    jitter_floor > 0 adds jitter_floor * mean(diag(K_Z)) up front; the KL
    regulariser uses this so a near-singular K_Z yields a finite (still
    enormous) penalty instead of overflowing.
    """
    Phi_Z = features.forward(net, Z) if phi_Z is None else phi_Z
    K_Z = config.sigma_w2 * (Phi_Z @ Phi_Z.T)
    if jitter_floor > 0.0:
        # relative plus absolute: the absolute part keeps the inverse bounded
        # even if the features at Z have collapsed entirely
        K_Z = K_Z + jitter_floor * (float(np.mean(np.diag(K_Z))) + 1.0) * np.eye(K_Z.shape[0])
    return KernelWorkspace(K_Z=K_Z, chol_KZ=cholesky(K_Z), Phi_Z=Phi_Z, sigma_w2=config.sigma_w2)


def nystrom_residuals(
    ws: KernelWorkspace,
    X: np.ndarray,
    net: features.FeatureNet,
    config: KernelConfig,
    phi_X: np.ndarray | None = None,
) -> np.ndarray:
    """Per-point reconstruction errors k(x,x) - k_Zx^T K_Z^{-1} k_Zx.

    Their sum is the trace criterion used for inducing-point selection.
    Tiny negative values from rounding are clamped to zero.
    """
    Phi_X = features.forward(net, X) if phi_X is None else phi_X
    if Phi_X.shape[1] != ws.Phi_Z.shape[1]:
        raise DimensionMismatch("feature widths of X and Z disagree")
    K_ZX = ws.sigma_w2 * (ws.Phi_Z @ Phi_X.T)
    half = tri_solve(ws.chol_KZ, K_ZX, "lower")  # L^{-1} K_ZX
    diag_K_X = ws.sigma_w2 * np.einsum("ij,ij->i", Phi_X, Phi_X)
    residuals = diag_K_X - np.einsum("ij,ij->j", half, half)
    worst = residuals.min() if residuals.size else 0.0
    if worst < RESIDUAL_CLAMP:
        log.debug("Nystrom residual clamp: min residual %.3e", worst)
    return np.maximum(residuals, 0.0)
