"""Discrete selection of inducing inputs from a task's training set.

A candidate set is scored under one of five criteria (lower is better for
all; the ELBO is negated) and refined by greedy local swaps: propose
replacing one random member with one random outsider, keep the swap only if
the score strictly decreases. The trace criterion measures how badly the
full kernel matrix is reconstructed from the candidate set and needs no
labels; the supervised criteria score the predictions made by the posterior
distilled onto the candidate set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import features, objectives, summaries
from .errors import EmptyHoldout
from .kernel import KernelConfig, build_workspace
from .numerics import QuadratureRule, chol_solve, cholesky, gauss_hermite, tri_solve

CRITERIA = ("random", "trace", "elbo", "log_pred_density", "class_error")


@dataclass(frozen=True)
class SelectionConfig:
    criterion: str = "trace"
    M: int = 10
    search_steps: int = 1000
    eval_cap: int = 2000
    seed: int = 0
    class_balanced_init: bool = True

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.M < 1 or self.search_steps < 0:
            raise ValueError("need M >= 1 and search_steps >= 0")


@dataclass(frozen=True)
class SelectionResult:
    indices: np.ndarray
    final_score: float
    score_trace: list[float] = field(default_factory=list)


class _SearchContext:
    """Per-search caches: features are fixed while theta is frozen."""

    def __init__(self, X, y, q, net, config, quad, likelihood, eval_pool=None, mc_seed=0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = None if y is None else np.asarray(y)
        self.q = q
        self.net = net
        self.config = config
        self.quad = quad
        self.likelihood = likelihood
        self.Phi = features.forward(net, self.X)
        self.S = self.Phi.T @ self.Phi  # Gram of features, reused per proposal
        self.trace_KX = config.sigma_w2 * float(np.trace(self.S))
        self.eval_pool = eval_pool  # candidate holdout indices, or None for all
        self.mc_seed = mc_seed
        self.L_w = None if q is None else q.chol()
        # zero-feature points carry no information and make K_Z singular;
        # they are never candidates for the inducing set
        self.alive = np.flatnonzero(np.einsum("ij,ij->i", self.Phi, self.Phi) > 1e-12)

    def score(self, z_indices: np.ndarray) -> float:
        raise NotImplementedError


def _trace_score(ctx: _SearchContext, z_indices: np.ndarray) -> float:
    """sum_j k(x_j,x_j) - k_Zx^T K_Z^{-1} k_Zx over all training points.

    Uses tr(K_Z^{-1} K_ZX K_XZ) = sigma_w2^2 * tr(W S W^T) with
    W = L^{-1} Phi_Z, avoiding the N x M cross matrix.
    """
    Phi_Z = ctx.Phi[z_indices]
    K_Z = ctx.config.sigma_w2 * (Phi_Z @ Phi_Z.T)
    factor = cholesky(K_Z)
    W = tri_solve(factor, Phi_Z, "lower")
    reconstructed = ctx.config.sigma_w2**2 * float(np.sum((W @ ctx.S) * W))
    return ctx.trace_KX - reconstructed


def _distill_candidate(ctx: _SearchContext, z_indices: np.ndarray):
    """Workspace plus distilled (mu_u, cov_u) per function at a candidate Z."""
    Phi_Z = ctx.Phi[z_indices]
    ws = build_workspace(ctx.net, ctx.config, ctx.X[z_indices], phi_Z=Phi_Z)
    mu_u = Phi_Z @ ctx.q.mu.T  # (M, C)
    A = np.einsum("mk,ckj->cmj", Phi_Z, ctx.L_w)
    cov_u = np.einsum("cmj,cnj->cmn", A, A)
    return ws, mu_u.T, cov_u


def _latent_moments_at(ctx, ws, mu_u, cov_u, point_indices):
    """Predictive N(m, v) per function at the given training points."""
    Phi_e = ctx.Phi[point_indices]
    k_Zx = ws.sigma_w2 * (ws.Phi_Z @ Phi_e.T)
    half = tri_solve(ws.chol_KZ, k_Zx, "lower")
    beta = tri_solve(ws.chol_KZ, half, "lower-transposed")
    k_xx = ws.sigma_w2 * np.einsum("bj,bj->b", Phi_e, Phi_e)
    nystrom = np.einsum("mb,mb->b", half, half)
    means = (mu_u @ beta).T  # (E, C)
    corr = np.einsum("mb,cmn,nb->bc", beta, cov_u, beta)
    variances = np.maximum(k_xx[:, None] - nystrom[:, None] + corr, 0.0)
    return means, variances


def _holdout(ctx: _SearchContext, z_indices: np.ndarray) -> np.ndarray:
    pool = ctx.eval_pool if ctx.eval_pool is not None else np.arange(ctx.X.shape[0])
    mask = np.ones(ctx.X.shape[0], dtype=bool)
    mask[z_indices] = False
    held = pool[mask[pool]]
    if held.size == 0:
        raise EmptyHoldout("no training points left outside the inducing set")
    return held


def _predictive_probs(ctx, means, variances):
    return summaries.class_probabilities(
        ctx.likelihood, means, variances, seed=ctx.mc_seed
    )


def _labels_as_indices(ctx, point_indices):
    y = ctx.y[point_indices]
    if ctx.likelihood.kind == "bernoulli-logit":
        return ((np.asarray(y) + 1) // 2).astype(np.intp)  # -1/+1 -> 0/1
    return np.asarray(y, dtype=np.intp)


def _log_pred_density_score(ctx, z_indices):
    held = _holdout(ctx, z_indices)
    ws, mu_u, cov_u = _distill_candidate(ctx, z_indices)
    means, variances = _latent_moments_at(ctx, ws, mu_u, cov_u, held)
    probs = _predictive_probs(ctx, means, variances)
    y_idx = _labels_as_indices(ctx, held)
    dens = np.maximum(probs[np.arange(held.size), y_idx], 1e-300)
    return -float(np.mean(np.log(dens)))


def _class_error_score(ctx, z_indices):
    held = _holdout(ctx, z_indices)
    ws, mu_u, cov_u = _distill_candidate(ctx, z_indices)
    means, variances = _latent_moments_at(ctx, ws, mu_u, cov_u, held)
    probs = _predictive_probs(ctx, means, variances)
    y_idx = _labels_as_indices(ctx, held)
    return float(np.mean(probs.argmax(axis=1) != y_idx))


def _elbo_score(ctx, z_indices):
    """Negated sparse-GP lower bound: data fit at all points minus the
    functional KL of the distilled posterior at the candidate set."""
    ws, mu_u, cov_u = _distill_candidate(ctx, z_indices)
    every = np.arange(ctx.X.shape[0])
    means, variances = _latent_moments_at(ctx, ws, mu_u, cov_u, every)
    if ctx.likelihood.kind == "bernoulli-logit":
        ell, _, _ = objectives._binary_ell_terms(
            means[:, 0], variances[:, 0], ctx.y, ctx.quad
        )
    else:
        rng = np.random.default_rng(ctx.mc_seed)
        ell, _, _ = objectives._softmax_ell_terms(
            means, variances, np.asarray(ctx.y, dtype=np.intp), 128, rng
        )
    M = len(z_indices)
    logdet_K = ws.chol_KZ.logdet()
    kl = 0.0
    for c in range(mu_u.shape[0]):
        cov = cov_u[c] + 1e-12 * np.eye(M)  # distilled cov may be singular
        factor_c = cholesky(cov)
        kl += 0.5 * (
            float(np.trace(chol_solve(ws.chol_KZ, cov)))
            + float(mu_u[c] @ chol_solve(ws.chol_KZ, mu_u[c]))
            - M
            + logdet_K
            - factor_c.logdet()
        )
    return -(float(ell.sum()) - kl)


_SCORERS = {
    "trace": _trace_score,
    "elbo": _elbo_score,
    "log_pred_density": _log_pred_density_score,
    "class_error": _class_error_score,
}


def score(
    criterion: str,
    z_indices,
    X,
    y,
    q: objectives.WeightPosterior | None,
    net: features.FeatureNet,
    config: KernelConfig,
    quad: QuadratureRule | None = None,
    likelihood: objectives.Likelihood | None = None,
    holdout_pool=None,
    mc_seed: int = 0,
) -> float:
    """Score one candidate set; lower is better for every criterion."""
    z_indices = np.asarray(z_indices, dtype=np.intp)
    if len(np.unique(z_indices)) != len(z_indices):
        raise ValueError("duplicate inducing indices")
    ctx = _SearchContext(
        X, y, q, net, config, quad or gauss_hermite(20), likelihood,
        eval_pool=None if holdout_pool is None else np.asarray(holdout_pool),
        mc_seed=mc_seed,
    )
    return _SCORERS[criterion](ctx, z_indices)


def _initial_indices(cfg: SelectionConfig, y, candidates: np.ndarray, rng) -> np.ndarray:
    if not cfg.class_balanced_init or y is None:
        return rng.choice(candidates, size=cfg.M, replace=False)
    labels = np.asarray(y)[candidates]
    classes = np.unique(labels)
    base, extra = divmod(cfg.M, len(classes))
    chosen: list[np.ndarray] = []
    short = 0
    for rank, cls in enumerate(classes):
        quota = base + (1 if rank < extra else 0)
        members = candidates[labels == cls]
        take = min(quota, members.size)
        short += quota - take
        chosen.append(rng.choice(members, size=take, replace=False))
    picked = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.intp)
    if short:  # classes smaller than their quota: top up from the rest
        mask = np.isin(candidates, picked, invert=True)
        picked = np.concatenate([picked, rng.choice(candidates[mask], short, replace=False)])
    return picked.astype(np.intp)


def select(
    cfg: SelectionConfig,
    X,
    y,
    q: objectives.WeightPosterior | None,
    net: features.FeatureNet,
    config: KernelConfig,
    quad: QuadratureRule | None = None,
    likelihood: objectives.Likelihood | None = None,
) -> SelectionResult:
    """Greedy swap search from a random (optionally class-balanced) start.

    The random criterion returns the initial set untouched. Deterministic
    given cfg.seed.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if cfg.M > N:
        raise ValueError(f"M={cfg.M} exceeds the {N} available training points")
    rng = np.random.default_rng(cfg.seed)
    ctx = _SearchContext(
        X, y, q, net, config, quad or gauss_hermite(20), likelihood,
        mc_seed=cfg.seed,
    )
    if ctx.alive.size < cfg.M:
        raise ValueError(
            f"only {ctx.alive.size} points have nonzero features, need M={cfg.M}"
        )
    indices = _initial_indices(cfg, y, ctx.alive, rng)
    if cfg.criterion == "random":
        return SelectionResult(indices=indices, final_score=math.nan)

    if cfg.criterion in ("log_pred_density", "class_error") and N > cfg.eval_cap:
        ctx.eval_pool = np.sort(rng.choice(N, size=cfg.eval_cap, replace=False))
    scorer = _SCORERS[cfg.criterion]

    indices = np.array(indices, dtype=np.intp)
    in_set = np.zeros(N, dtype=bool)
    in_set[indices] = True
    outside = ctx.alive[~in_set[ctx.alive]]
    best = scorer(ctx, indices)
    accepted: list[float] = []
    if outside.size == 0:  # M = N: nothing to swap in
        return SelectionResult(indices=indices, final_score=float(best))
    for _ in range(cfg.search_steps):
        j = int(rng.integers(cfg.M))
        i = int(rng.integers(outside.size))
        candidate = indices.copy()
        candidate[j], swapped_out = outside[i], indices[j]
        trial = scorer(ctx, candidate)
        if trial < best:
            indices = candidate
            outside[i] = swapped_out
            best = trial
            accepted.append(best)
    return SelectionResult(indices=indices, final_score=float(best), score_trace=accepted)
