"""Per-task functional memories and sparse-GP prediction.

A task summary freezes what was learnt about one task: the inducing inputs
Z and, per latent function, the Gaussian belief (mu_u, cov_u) over the
function values at Z. Summaries are immutable; the training data and the
weight posterior they were distilled from are discarded. Prediction rebuilds
K_Z from the *current* network parameters, which lets the stored beliefs
adapt to later representation drift: at the inducing inputs themselves the
predicted mean always reproduces mu_u.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from . import features
from .errors import BadMagic, TruncatedFile
from .kernel import KernelConfig, build_workspace
from .numerics import cholesky, gauss_hermite, tri_solve
from .objectives import Likelihood, WeightPosterior

CHECKPOINT_MAGIC = b"FRCLSUM1"
PREDICT_MC_SAMPLES = 512
PREDICT_QUAD_ORDER = 20


@dataclass(frozen=True)
class TaskSummary:
    """(Z, mu_u, cov_u) per latent function, plus cached log-determinants.

    cov_u includes the jitter added at distillation time (mandatory when
    there are more inducing points than features), and logdet_cov_u matches
    it exactly, so every downstream KL uses one consistent covariance.
    """

    task_id: int
    Z: np.ndarray
    mu_u: np.ndarray  # (C, M)
    cov_u: np.ndarray  # (C, M, M)
    logdet_cov_u: np.ndarray  # (C,)
    likelihood: Likelihood

    @property
    def num_functions(self) -> int:
        return self.mu_u.shape[0]

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class Prediction:
    """Latent mean/variance per function and normalised class probabilities."""

    mean: np.ndarray
    variance: np.ndarray
    class_probabilities: np.ndarray


def distill(
    q: WeightPosterior,
    Z: np.ndarray,
    net: features.FeatureNet,
    config: KernelConfig,
    task_id: int,
    likelihood: Likelihood,
) -> TaskSummary:
    """Project the trained weight posterior onto the function values at Z.

    mu_u = Phi_Z mu_w and cov_u = Phi_Z Sigma_w Phi_Z^T per function. The
    result carries no reference to q or the training data.
    """
    Phi_Z = features.forward(net, Z)
    M = Phi_Z.shape[0]
    L = q.chol()
    mu_u = np.empty((q.num_functions, M))
    cov_u = np.empty((q.num_functions, M, M))
    logdets = np.empty(q.num_functions)
    for c in range(q.num_functions):
        mu_u[c] = Phi_Z @ q.mu[c]
        A = Phi_Z @ L[c]
        raw = A @ A.T
        factor = cholesky(raw)
        cov_u[c] = raw + factor.jitter_used * np.eye(M)
        logdets[c] = factor.logdet()
    return TaskSummary(
        task_id=task_id,
        Z=np.array(Z, dtype=np.float64, copy=True),
        mu_u=mu_u,
        cov_u=cov_u,
        logdet_cov_u=logdets,
        likelihood=likelihood,
    )


def latent_moments(
    summary: TaskSummary,
    x_star: np.ndarray,
    net: features.FeatureNet,
    config: KernelConfig,
    phi_star: np.ndarray | None = None,
):
    """Posterior mean and variance of each latent function at x_star.

    mean_c = mu_u_c^T K_Z^{-1} k_Zx and
    var_c = k(x,x) + k_Zx^T K_Z^{-1} [cov_u_c - K_Z] K_Z^{-1} k_Zx,
    with K_Z rebuilt from the current parameters. Returns (means, variances)
    of shape (B, C); variances are clamped at zero.
    """
    Phi_star = features.forward(net, x_star) if phi_star is None else phi_star
    ws = build_workspace(net, config, summary.Z)
    k_Zx = ws.sigma_w2 * (ws.Phi_Z @ Phi_star.T)  # (M, B)
    half = tri_solve(ws.chol_KZ, k_Zx, "lower")  # L^{-1} k_Zx
    beta = tri_solve(ws.chol_KZ, half, "lower-transposed")  # K_Z^{-1} k_Zx
    k_xx = ws.sigma_w2 * np.einsum("bj,bj->b", Phi_star, Phi_star)
    nystrom = np.einsum("mb,mb->b", half, half)  # k_Zx^T K_Z^{-1} k_Zx

    B = Phi_star.shape[0]
    C = summary.num_functions
    means = np.empty((B, C))
    variances = np.empty((B, C))
    for c in range(C):
        means[:, c] = summary.mu_u[c] @ beta
        correction = np.einsum("mb,mn,nb->b", beta, summary.cov_u[c], beta)
        variances[:, c] = k_xx - nystrom + correction
    return means, np.maximum(variances, 0.0)


def class_probabilities(
    likelihood: Likelihood,
    means: np.ndarray,
    variances: np.ndarray,
    seed: int = 0,
    mc_samples: int = PREDICT_MC_SAMPLES,
) -> np.ndarray:
    """Predictive class probabilities from latent moments, shape (B, class_count).

    Bernoulli integrates the sigmoid under the latent Gaussian by
    quadrature; softmax averages over Monte-Carlo draws (fixed seed).
    """
    if likelihood.kind == "bernoulli-logit":
        rule = gauss_hermite(PREDICT_QUAD_ORDER)
        m, v = means[:, 0], variances[:, 0]
        f = m[:, None] + np.sqrt(2.0 * v)[:, None] * rule.nodes
        p_plus = sigmoid(f) @ (rule.weights / np.sqrt(np.pi))
        return np.stack([1.0 - p_plus, p_plus], axis=1)
    rng = np.random.default_rng(seed)
    sd = np.sqrt(variances)
    eps = rng.standard_normal((mc_samples, *means.shape))
    f = means[None] + sd[None] * eps
    f -= f.max(axis=2, keepdims=True)
    e = np.exp(f)
    p = e / e.sum(axis=2, keepdims=True)
    return p.mean(axis=0)


def predict(
    summary: TaskSummary,
    x_star: np.ndarray,
    net: features.FeatureNet,
    config: KernelConfig,
    seed: int = 0,
) -> list[Prediction]:
    """Full predictive distribution at each row of x_star."""
    means, variances = latent_moments(summary, x_star, net, config)
    probs = class_probabilities(summary.likelihood, means, variances, seed=seed)
    return [
        Prediction(mean=means[j], variance=variances[j], class_probabilities=probs[j])
        for j in range(x_star.shape[0])
    ]


def save_summary(summary: TaskSummary, path) -> None:
    """Binary checkpoint: magic, task_id, M, D, C, Z, then per-function blocks.

    Integers int64 little-endian, arrays float64 row-major. C counts stored
    latent functions (1 for a binary task); each block is mu_u, cov_u,
    logdet.
    """
    M, D = summary.Z.shape
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4q", summary.task_id, M, D, summary.num_functions))
        fh.write(np.ascontiguousarray(summary.Z, dtype="<f8").tobytes())
        for c in range(summary.num_functions):
            fh.write(np.ascontiguousarray(summary.mu_u[c], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(summary.cov_u[c], dtype="<f8").tobytes())
            fh.write(struct.pack("<d", float(summary.logdet_cov_u[c])))


def load_summary(path) -> TaskSummary:
    """Read a summary checkpoint; a single stored function means a binary task."""

    def read_exact(fh, n, what):
        raw = fh.read(n)
        if len(raw) < n:
            raise TruncatedFile(f"missing {what}")
        return raw

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        task_id, M, D, C = struct.unpack("<4q", read_exact(fh, 32, "header"))
        Z = np.frombuffer(read_exact(fh, 8 * M * D, "inducing inputs"), dtype="<f8")
        Z = Z.reshape(M, D).astype(np.float64)
        mu_u = np.empty((C, M))
        cov_u = np.empty((C, M, M))
        logdets = np.empty(C)
        for c in range(C):
            mu_u[c] = np.frombuffer(read_exact(fh, 8 * M, "mean"), dtype="<f8")
            cov = np.frombuffer(read_exact(fh, 8 * M * M, "covariance"), dtype="<f8")
            cov_u[c] = cov.reshape(M, M)
            (logdets[c],) = struct.unpack("<d", read_exact(fh, 8, "logdet"))
    likelihood = (
        Likelihood("bernoulli-logit", 2) if C == 1 else Likelihood("softmax", C)
    )
    return TaskSummary(
        task_id=task_id, Z=Z, mu_u=mu_u, cov_u=cov_u, logdet_cov_u=logdets,
        likelihood=likelihood,
    )
