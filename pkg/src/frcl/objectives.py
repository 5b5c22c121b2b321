"""Variational posteriors, KL terms, expected log-likelihoods, and the
training objective.

The objective maximised while learning task k is

    F = (N_k / B) * sum_batch E_q[log p(y | w^T phi(x))]
        - KL(q(w) || N(0, sigma_w2 I))
        - sum_{past tasks i} KL(q(u_i) || N(0, K_{Z_i}))

where the last sum is the function-space regulariser: each stored summary
pins the network's belief about a finished task through the theta-dependent
prior N(0, K_{Z_i}). All gradients here are exact derivatives of the
computed quantities (finite-difference checked in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.special import expit as sigmoid

from . import features
from .errors import EmptyBatch, NonFiniteInput, NonFiniteObjective
from .kernel import KernelConfig, build_workspace
from .numerics import QuadratureRule, chol_solve, tri_solve

if TYPE_CHECKING:
    from .summaries import TaskSummary

SQRT_PI = np.sqrt(np.pi)
# Below this marginal variance the sqrt(v) chain rule is replaced by the
# Gaussian-identity form d/dv E[g] = E[g'']/2 (finite at v = 0).
TINY_VARIANCE = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1 + e^x); y must be positive
    return np.log(np.expm1(y))


@dataclass(frozen=True)
class Likelihood:
    """bernoulli-logit: one latent function, labels in {-1, +1}.
    softmax: one latent function per class, labels in [0, class_count).
    """

    kind: str
    class_count: int

    def __post_init__(self):
        if self.kind == "bernoulli-logit":
            if self.class_count != 2:
                raise ValueError("bernoulli-logit requires class_count = 2")
        elif self.kind == "softmax":
            if self.class_count < 2:
                raise ValueError("softmax requires class_count >= 2")
        else:
            raise ValueError(f"unknown likelihood kind {self.kind!r}")

    @property
    def num_functions(self) -> int:
        return 1 if self.kind == "bernoulli-logit" else self.class_count


class WeightPosterior:
    """Per-function Gaussian q(w) = N(mu, L L^T) over last-layer weights.

    L is lower triangular with its diagonal parameterised through softplus
    of an unconstrained value, so the covariance stays positive definite
    under unconstrained gradient ascent. `mu` has shape (C, K) and `L_raw`
    (C, K, K); the strict upper triangle of L_raw is unused.
    """

    def __init__(self, mu: np.ndarray, L_raw: np.ndarray):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.L_raw = np.asarray(L_raw, dtype=np.float64)
        if self.mu.ndim != 2 or self.L_raw.shape != (*self.mu.shape, self.mu.shape[1]):
            raise ValueError(f"inconsistent shapes {self.mu.shape} / {self.L_raw.shape}")

    @property
    def num_functions(self) -> int:
        return self.mu.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.mu.shape[1]

    def chol(self) -> np.ndarray:
        """Materialised lower-triangular factors, shape (C, K, K)."""
        L = np.tril(self.L_raw, -1)
        idx = np.arange(self.feature_dim)
        L[:, idx, idx] = softplus(self.L_raw[:, idx, idx])
        return L

    def raw_grad_from_chol_grad(self, grad_L: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. the materialised L into L_raw space."""
        grad = np.tril(grad_L, -1)
        idx = np.arange(self.feature_dim)
        grad[:, idx, idx] = grad_L[:, idx, idx] * sigmoid(self.L_raw[:, idx, idx])
        return grad

    def param_arrays(self) -> list[np.ndarray]:
        return [self.mu, self.L_raw]

    def copy(self) -> "WeightPosterior":
        return WeightPosterior(self.mu.copy(), self.L_raw.copy())


def init_posterior(feature_dim: int, num_functions: int, seed: int) -> WeightPosterior:
    """mu ~ N(0, 1e-3^2) elementwise, L = I (raw diagonal = softplus^{-1}(1))."""
    rng = np.random.default_rng(seed)
    mu = 1e-3 * rng.standard_normal((num_functions, feature_dim))
    L_raw = np.zeros((num_functions, feature_dim, feature_dim))
    idx = np.arange(feature_dim)
    L_raw[:, idx, idx] = softplus_inv(1.0)
    return WeightPosterior(mu, L_raw)


def kl_gauss_vs_standard(mu: np.ndarray, L: np.ndarray, sigma_w2: float) -> float:
    """KL(N(mu, L L^T) || N(0, sigma_w2 I)) in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(L))):
        raise NonFiniteInput("posterior parameters contain non-finite values")
    K = mu.shape[0]
    trace = float(np.sum(L * L))
    sq_mean = float(mu @ mu)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(L))))
    return 0.5 * (trace / sigma_w2 + sq_mean / sigma_w2 - K + K * np.log(sigma_w2) - logdet_q)


def _kl_gauss_vs_standard_grads(mu, L, sigma_w2):
    """(dKL/dmu, dKL/dL) for the closed form above."""
    grad_mu = mu / sigma_w2
    grad_L = L / sigma_w2
    idx = np.arange(L.shape[0])
    grad_L[idx, idx] -= 1.0 / np.diag(L)
    return grad_mu, np.tril(grad_L)


def kl_functional(
    summary: "TaskSummary",
    net: features.FeatureNet,
    config: KernelConfig,
) -> tuple[float, features.ParamGrad]:
    """KL(q(u) || N(0, K_Z)) for one stored summary, with its theta-gradient.

    The value sums over the summary's latent functions. q(u) is frozen;
    only the prior depends on theta through K_Z = sigma_w2 Phi_Z Phi_Z^T, so
    the gradient flows via dKL/dK_Z = (K_Z^{-1} - K_Z^{-1}(Sigma_u +
    mu_u mu_u^T)K_Z^{-1}) / 2 chained into the feature network.
    """
    cache = features.forward_cached(net, summary.Z)
    Phi_Z = cache.activations[-1]
    # relative jitter floor bounds the penalty when later training drives
    # K_Z towards singularity; the restoring gradient stays finite
    ws = build_workspace(net, config, summary.Z, phi_Z=Phi_Z, jitter_floor=1e-8)
    M = Phi_Z.shape[0]
    logdet_K = ws.chol_KZ.logdet()
    K_inv = chol_solve(ws.chol_KZ, np.eye(M))

    total = 0.0
    G_total = np.zeros((M, M))
    for c in range(summary.num_functions):
        mu_u = summary.mu_u[c]
        cov_u = summary.cov_u[c]
        Kinv_cov = chol_solve(ws.chol_KZ, cov_u)
        alpha = chol_solve(ws.chol_KZ, mu_u)
        total += 0.5 * (
            float(np.trace(Kinv_cov))
            + float(mu_u @ alpha)
            - M
            + logdet_K
            - summary.logdet_cov_u[c]
        )
        G_total += 0.5 * (K_inv - Kinv_cov @ K_inv - np.outer(alpha, alpha))
    G_total = 0.5 * (G_total + G_total.T)  # symmetric up to rounding
    cot_Phi = 2.0 * config.sigma_w2 * (G_total @ Phi_Z)
    grad = features.backward(net, summary.Z, cot_Phi, cache)
    return total, grad


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _binary_ell_terms(m, v, y, rule: QuadratureRule):
    """Expected log-sigmoid likelihood terms and their (m, v) derivatives.

    m, v, y are length-B arrays (labels +-1). Returns (ell, d/dm, d/dv),
    each length B. The v-derivative uses the exact chain rule where v > 0
    and the E[g'']/2 identity in the v -> 0 limit.
    """
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if np.any(v < 0):
        raise ValueError("negative marginal variance")
    sd2 = np.sqrt(2.0 * v)
    f = m[:, None] + sd2[:, None] * rule.nodes[None, :]
    t = y[:, None] * f
    w = rule.weights / SQRT_PI
    ell = _log_sigmoid(t) @ w
    gprime = y[:, None] * sigmoid(-t)  # d/df log sigmoid(y f)
    dm = gprime @ w
    dv = np.empty_like(dm)
    pos = v > TINY_VARIANCE
    if np.any(pos):
        scaled = gprime[pos] * (rule.nodes[None, :] / sd2[pos, None])
        dv[pos] = scaled @ w
    if np.any(~pos):
        g2 = -(sigmoid(t[~pos]) * sigmoid(-t[~pos]))
        dv[~pos] = 0.5 * (g2 @ w)
    return ell, dm, dv


def expected_loglik_binary(m: float, v: float, y: int, rule: QuadratureRule) -> float:
    """E_{f~N(m,v)}[log sigmoid(y f)] by Gauss-Hermite quadrature."""
    ell, _, _ = _binary_ell_terms([m], [v], [y], rule)
    return float(ell[0])


def _softmax_ell_terms(means, variances, y, sample_count, rng):
    """Reparameterised MC estimate of E[log softmax_y] with (m, v) grads.

    means/variances have shape (B, C), y length B. Returns (ell, dm, dv)
    with ell length B and dm, dv shape (B, C).
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if np.any(variances < 0):
        raise ValueError("negative marginal variance")
    B, C = means.shape
    sd = np.sqrt(variances)
    eps = rng.standard_normal((sample_count, B, C))
    f = means[None] + sd[None] * eps
    f_max = f.max(axis=2, keepdims=True)
    lse = np.log(np.exp(f - f_max).sum(axis=2)) + f_max[:, :, 0]
    rows = np.arange(B)
    ell = (f[:, rows, y] - lse).mean(axis=0)
    p = np.exp(f - lse[:, :, None])
    delta = np.zeros((B, C))
    delta[rows, y] = 1.0
    resid = delta[None] - p  # (S, B, C)
    dm = resid.mean(axis=0)
    dsd = (resid * eps).mean(axis=0)
    dv = np.where(sd > np.sqrt(TINY_VARIANCE), dsd / (2.0 * np.maximum(sd, 1e-300)), 0.0)
    return ell, dm, dv


def expected_loglik_softmax(
    means: np.ndarray, variances: np.ndarray, y: int, sample_count: int, seed: int
) -> float:
    """E[log softmax_y(f_1..f_C)], f_c ~ N(means_c, vars_c) independent."""
    rng = np.random.default_rng(seed)
    ell, _, _ = _softmax_ell_terms(
        np.asarray(means, dtype=np.float64)[None, :],
        np.asarray(variances, dtype=np.float64)[None, :],
        np.asarray([y]),
        sample_count,
        rng,
    )
    return float(ell[0])


@dataclass
class ObjectiveReport:
    """One evaluation of the training objective and all its gradients.

    elbo = expected_loglik - kl_current - sum(kl_regularisers), with the
    gradients pointing in the ascent direction of elbo.
    """

    elbo: float
    expected_loglik: float
    kl_current: float
    kl_regularisers: np.ndarray
    grad_theta: features.ParamGrad
    grad_mu: np.ndarray
    grad_L_raw: np.ndarray


def marginal_moments(Phi: np.ndarray, q: WeightPosterior):
    """Per-point marginals f_c(x) ~ N(mu_c^T phi, ||L_c^T phi||^2).

    Returns (means (B, C), variances (B, C), A, L) where A[c] = Phi @ L_c
    and L are kept for gradient assembly.
    """
    L = q.chol()
    means = Phi @ q.mu.T
    A = np.einsum("bk,ckj->cbj", Phi, L)  # (C, B, K), rows a^T = phi^T L_c
    variances = np.einsum("cbj,cbj->cb", A, A).T
    return means, variances, A, L


def assemble_objective(
    net: features.FeatureNet,
    q: WeightPosterior,
    X_batch: np.ndarray,
    y_batch: np.ndarray,
    task_size: int,
    summaries: Sequence["TaskSummary"],
    likelihood: Likelihood,
    quad: QuadratureRule,
    config: KernelConfig | None = None,
    subsample: int | None = None,
    seed: int = 0,
    softmax_samples: int = 128,
) -> ObjectiveReport:
    """Evaluate F and its gradients w.r.t. theta, mu_w, and L_w on one minibatch.

    The expected log-likelihood is scaled by task_size / batch_size. When
    subsample < len(summaries), that many past-task KL terms are drawn
    uniformly without replacement and rescaled to keep the estimate
    unbiased. Deterministic given (parameters, batch, seed).
    """
    config = config or KernelConfig()
    X_batch = np.asarray(X_batch, dtype=np.float64)
    B = X_batch.shape[0]
    if B == 0:
        raise EmptyBatch("empty minibatch")
    rng = np.random.default_rng(seed)
    scale = task_size / B

    cache = features.forward_cached(net, X_batch)
    Phi = cache.activations[-1]
    if not np.all(np.isfinite(Phi)):
        raise NonFiniteObjective("non-finite features: training has diverged")
    means, variances, A, L = marginal_moments(Phi, q)

    if likelihood.kind == "bernoulli-logit":
        ell, dm, dv = _binary_ell_terms(means[:, 0], variances[:, 0], y_batch, quad)
        dm, dv = dm[:, None], dv[:, None]
    else:
        y_idx = np.asarray(y_batch, dtype=np.intp)
        ell, dm, dv = _softmax_ell_terms(means, variances, y_idx, softmax_samples, rng)
    expected_loglik = scale * float(ell.sum())
    dm = scale * dm
    dv = scale * dv

    # Likelihood gradients: means = Phi mu_c, variances = ||L_c^T phi||^2.
    C = q.num_functions
    grad_mu = dm.T @ Phi  # (C, K)
    weighted_A = dv.T[:, :, None] * A  # (C, B, K)
    grad_L = 2.0 * np.einsum("bk,cbj->ckj", Phi, weighted_A)
    cot_Phi = dm @ q.mu + 2.0 * np.einsum("cbj,ckj->bk", weighted_A, L)

    # Current-task weight-space KL.
    kl_current = 0.0
    for c in range(C):
        kl_current += kl_gauss_vs_standard(q.mu[c], L[c], config.sigma_w2)
        g_mu, g_L = _kl_gauss_vs_standard_grads(q.mu[c], L[c], config.sigma_w2)
        grad_mu[c] -= g_mu
        grad_L[c] -= g_L

    grad_theta = features.backward(net, X_batch, cot_Phi, cache)

    # Function-space regularisers from past tasks (optionally subsampled).
    n_summaries = len(summaries)
    kl_regularisers = np.zeros(n_summaries)
    if n_summaries:
        if subsample is None or subsample >= n_summaries:
            chosen = range(n_summaries)
            kl_scale = 1.0
        else:
            chosen = rng.choice(n_summaries, size=subsample, replace=False)
            kl_scale = n_summaries / subsample
        for i in chosen:
            value, grad = kl_functional(summaries[i], net, config)
            kl_regularisers[i] = kl_scale * value
            grad_theta.add_(grad, scale=-kl_scale)

    elbo = expected_loglik - kl_current - float(kl_regularisers.sum())
    if not np.isfinite(elbo):
        raise NonFiniteObjective(
            f"objective diverged: loglik={expected_loglik}, kl_current={kl_current}, "
            f"kl_reg={kl_regularisers.sum()}"
        )
    return ObjectiveReport(
        elbo=elbo,
        expected_loglik=expected_loglik,
        kl_current=kl_current,
        kl_regularisers=kl_regularisers,
        grad_theta=grad_theta,
        grad_mu=grad_mu,
        grad_L_raw=q.raw_grad_from_chol_grad(grad_L),
    )
