"""Variational objective: closed forms, Monte-Carlo oracles, gradient checks."""

import numpy as np
import pytest

from frcl import features, objectives, summaries
from frcl.errors import EmptyBatch
from frcl.kernel import KernelConfig
from frcl.numerics import gauss_hermite

from oracles import assert_grads_close, finite_diff_array_grad, finite_diff_param_grads, random_net

QUAD = gauss_hermite(20)


def random_posterior(rng, feature_dim, num_functions=1, spread=0.6):
    q = objectives.init_posterior(feature_dim, num_functions, seed=int(rng.integers(2**31)))
    q.mu += rng.standard_normal(q.mu.shape) * spread
    q.L_raw += rng.standard_normal(q.L_raw.shape) * spread * 0.5
    return q


def make_summary(rng, net, config, M=3, num_functions=1, likelihood=None):
    q = random_posterior(rng, net.feature_dim, num_functions)
    # redraw until K_Z is comfortably full rank: gradient checks are only
    # well posed away from the jitter-rescue regime
    for _ in range(100):
        Z = rng.standard_normal((M, net.input_dim))
        Phi_Z = features.forward(net, Z)
        K_Z = config.sigma_w2 * Phi_Z @ Phi_Z.T
        if np.linalg.eigvalsh(K_Z).min() > 1e-3:
            break
    likelihood = likelihood or objectives.Likelihood("bernoulli-logit", 2)
    return summaries.distill(q, Z, net, config, task_id=0, likelihood=likelihood)


class TestKlGaussVsStandard:
    def test_zero_when_posterior_equals_prior(self):
        mu = np.zeros(4)
        L = np.eye(4)
        assert objectives.kl_gauss_vs_standard(mu, L, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form_1d(self):
        # K=1, mu=0, L=[1], sigma^2=2: 0.5 * (0.5 - 1 + ln 2)
        value = objectives.kl_gauss_vs_standard(np.zeros(1), np.eye(1), 2.0)
        assert value == pytest.approx(0.5 * (0.5 - 1.0 + np.log(2.0)), abs=1e-12)
        assert value == pytest.approx(0.09657, abs=1e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_monte_carlo_oracle(self, seed):
        rng = np.random.default_rng(seed)
        K = 3
        q = random_posterior(rng, K)
        L = q.chol()[0]
        mu = q.mu[0]
        sigma_w2 = 1.5
        value = objectives.kl_gauss_vs_standard(mu, L, sigma_w2)

        n = 1_000_000
        w = mu + rng.standard_normal((n, K)) @ L.T
        cov = L @ L.T
        inv = np.linalg.inv(cov)
        centered = w - mu
        log_q = -0.5 * (
            np.einsum("ij,jk,ik->i", centered, inv, centered)
            + K * np.log(2 * np.pi) + np.linalg.slogdet(cov)[1]
        )
        log_p = -0.5 * (
            np.einsum("ij,ij->i", w, w) / sigma_w2
            + K * np.log(2 * np.pi * sigma_w2)
        )
        samples = log_q - log_p
        se = samples.std(ddof=1) / np.sqrt(n)
        assert abs(value - samples.mean()) <= 3 * se

    @pytest.mark.parametrize("seed", range(10))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(100 + seed)
        q = random_posterior(rng, int(rng.integers(1, 6)))
        value = objectives.kl_gauss_vs_standard(q.mu[0], q.chol()[0], float(rng.uniform(0.5, 2)))
        assert value >= -1e-9


class TestKlFunctional:
    def test_zero_when_summary_matches_prior(self):
        # distilled at the same theta with a prior-matching posterior:
        # mu_w = 0, L_w = I gives cov_u = K_Z exactly (sigma_w2 = 1)
        rng = np.random.default_rng(0)
        net = random_net(rng, sizes=[4, 6, 5])
        config = KernelConfig(1.0)
        q = objectives.init_posterior(net.feature_dim, 1, seed=1)
        q.mu[:] = 0.0
        Z = rng.standard_normal((3, net.input_dim))
        summary = summaries.distill(q, Z, net, config, 0, objectives.Likelihood("bernoulli-logit", 2))
        value, _ = objectives.kl_functional(summary, net, config)
        assert abs(value) <= 1e-6

    def test_diagonal_closed_form(self):
        # K_Z = I, cov_u = diag(2, 0.5), mu_u = (1, 0):
        # KL = 0.5 * [(2 + 0.5) + 1 - 2 + 0 - (ln 2 + ln 0.5)] = 0.75
        net = features.FeatureNet(weights=[np.eye(2)], biases=[np.zeros(2)])
        config = KernelConfig(1.0)
        summary = summaries.TaskSummary(
            task_id=0,
            Z=np.eye(2),  # identity features: Phi_Z = I, K_Z = I
            mu_u=np.array([[1.0, 0.0]]),
            cov_u=np.array([[[2.0, 0.0], [0.0, 0.5]]]),
            logdet_cov_u=np.array([np.log(2.0) + np.log(0.5)]),
            likelihood=objectives.Likelihood("bernoulli-logit", 2),
        )
        value, _ = objectives.kl_functional(summary, net, config)
        assert value == pytest.approx(0.75, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_theta_gradient_finite_difference(self, seed):
        rng = np.random.default_rng(40 + seed)
        net = random_net(rng, sizes=[6, 5, 4])
        config = KernelConfig(1.0)
        summary = make_summary(rng, net, config, M=3)
        _, grad = objectives.kl_functional(summary, net, config)
        numeric = finite_diff_param_grads(
            lambda n: objectives.kl_functional(summary, n, config)[0], net
        )
        for a, n in zip(grad.arrays(), numeric):
            assert_grads_close(a, n, rel=1e-4, context=f"seed {seed}")

    @pytest.mark.parametrize("seed", range(5))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(70 + seed)
        net = random_net(rng, sizes=[5, 6, 4])
        config = KernelConfig(1.0)
        summary = make_summary(rng, net, config, M=3, num_functions=2,
                               likelihood=objectives.Likelihood("softmax", 2))
        value, _ = objectives.kl_functional(summary, net, config)
        assert value >= -1e-9


class TestExpectedLoglikBinary:
    def test_degenerate_gaussian(self):
        assert objectives.expected_loglik_binary(0.0, 0.0, 1, QUAD) == pytest.approx(
            np.log(0.5), abs=1e-12
        )

    def test_sign_symmetry_at_zero_mean(self):
        for v in (0.0, 0.5, 4.0):
            plus = objectives.expected_loglik_binary(0.0, v, 1, QUAD)
            minus = objectives.expected_loglik_binary(0.0, v, -1, QUAD)
            assert plus == pytest.approx(minus, abs=1e-12)
            assert plus <= 0.0

    def test_monte_carlo_oracle(self):
        m, v, y = 1.0, 4.0, 1
        value = objectives.expected_loglik_binary(m, v, y, QUAD)
        rng = np.random.default_rng(123)
        f = m + np.sqrt(v) * rng.standard_normal(10_000_000)
        samples = -np.logaddexp(0.0, -y * f)
        se = samples.std(ddof=1) / np.sqrt(len(samples))
        assert abs(value - samples.mean()) <= 3 * se

    def test_zero_variance_limit_is_log_sigmoid(self):
        for m, y in ((0.7, 1), (-1.2, 1), (2.0, -1)):
            value = objectives.expected_loglik_binary(m, 0.0, y, QUAD)
            assert value == pytest.approx(-np.logaddexp(0.0, -y * m), abs=1e-12)

    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            objectives.expected_loglik_binary(0.0, -1.0, 1, QUAD)


class TestExpectedLoglikSoftmax:
    def test_zero_variance_exact(self):
        means = np.array([0.2, -0.4, 1.1])
        value = objectives.expected_loglik_softmax(means, np.zeros(3), 2, 64, seed=0)
        expected = means[2] - np.log(np.exp(means).sum())
        assert value == pytest.approx(expected, abs=1e-12)

    def test_uniform_case_class_symmetric(self):
        # with identical means and variances every class index gives the same
        # value; at zero variance that value is exactly -log C
        C = 4
        per_class = []
        for y in range(C):
            vals = [
                objectives.expected_loglik_softmax(np.zeros(C), np.ones(C), y, 4096, seed=s)
                for s in range(10)
            ]
            per_class.append(np.mean(vals))
        se = np.std(per_class, ddof=1) / np.sqrt(C) + 1e-12
        assert max(per_class) - min(per_class) <= 6 * se + 0.02
        exact = objectives.expected_loglik_softmax(np.zeros(C), np.zeros(C), 1, 16, seed=0)
        assert exact == pytest.approx(-np.log(C), abs=1e-12)

    def test_two_class_reduces_to_binary(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal(2)
        v = rng.uniform(0.2, 1.5, 2)
        # log softmax_0(f0, f1) = log sigmoid(g) with g = f0 - f1 ~ N(m0-m1, v0+v1)
        binary = objectives.expected_loglik_binary(m[0] - m[1], v[0] + v[1], 1, QUAD)
        estimates = [
            objectives.expected_loglik_softmax(m, v, 0, 20_000, seed=s) for s in range(30)
        ]
        se = np.std(estimates, ddof=1) / np.sqrt(len(estimates))
        assert abs(np.mean(estimates) - binary) <= 3 * se

    def test_deterministic_given_seed(self):
        m = np.array([0.1, 0.2])
        v = np.array([1.0, 2.0])
        a = objectives.expected_loglik_softmax(m, v, 1, 128, seed=7)
        b = objectives.expected_loglik_softmax(m, v, 1, 128, seed=7)
        assert a == b


def desk_instance(rng, num_tasks=2, likelihood=None, sizes=None):
    net = random_net(rng, sizes=sizes or [6, 5, 4])
    config = KernelConfig(1.0)
    likelihood = likelihood or objectives.Likelihood("bernoulli-logit", 2)
    q = random_posterior(rng, net.feature_dim, likelihood.num_functions)
    X = rng.standard_normal((5, net.input_dim))
    if likelihood.kind == "bernoulli-logit":
        y = rng.choice([-1, 1], size=5)
    else:
        y = rng.integers(0, likelihood.class_count, size=5)
    summary_list = [
        make_summary(rng, net, config, M=3, num_functions=likelihood.num_functions,
                     likelihood=likelihood)
        for _ in range(num_tasks)
    ]
    return net, config, likelihood, q, X, y, summary_list


class TestAssembleObjective:
    def test_reduces_to_loglik_minus_weight_kl(self):
        rng = np.random.default_rng(0)
        net, config, likelihood, q, X, y, _ = desk_instance(rng, num_tasks=0)
        report = objectives.assemble_objective(
            net, q, X, y, task_size=len(X), summaries=[], likelihood=likelihood,
            quad=QUAD, config=config, seed=0,
        )
        assert report.kl_regularisers.size == 0
        assert report.elbo == pytest.approx(report.expected_loglik - report.kl_current)
        # term isolation: direct recomputation of both pieces
        Phi = features.forward(net, X)
        m = Phi @ q.mu[0]
        v = np.einsum("bk,bk->b", Phi @ q.chol()[0], Phi @ q.chol()[0])
        ell = sum(
            objectives.expected_loglik_binary(m[j], v[j], y[j], QUAD) for j in range(len(X))
        )
        assert report.expected_loglik == pytest.approx(ell, rel=1e-10)
        kl = objectives.kl_gauss_vs_standard(q.mu[0], q.chol()[0], 1.0)
        assert report.kl_current == pytest.approx(kl, rel=1e-10)

    def test_exhaustive_subsample_is_exact(self):
        rng = np.random.default_rng(1)
        net, config, likelihood, q, X, y, summary_list = desk_instance(rng, num_tasks=3)
        full = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=0
        )
        same = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config,
            subsample=3, seed=99,
        )
        np.testing.assert_allclose(full.kl_regularisers, same.kl_regularisers, rtol=1e-12)
        expected = [objectives.kl_functional(s, net, config)[0] for s in summary_list]
        np.testing.assert_allclose(full.kl_regularisers, expected, rtol=1e-12)

    def test_subsampling_unbiased(self):
        rng = np.random.default_rng(2)
        net, config, likelihood, q, X, y, summary_list = desk_instance(rng, num_tasks=5)
        exhaustive = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=0
        ).kl_regularisers.sum()
        totals = [
            objectives.assemble_objective(
                net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config,
                subsample=2, seed=s,
            ).kl_regularisers.sum()
            for s in range(10_000)
        ]
        assert np.mean(totals) == pytest.approx(exhaustive, rel=0.01)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        net, config, likelihood, q, X, y, summary_list = desk_instance(rng, num_tasks=2)
        a = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=11
        )
        b = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=11
        )
        assert a.elbo == b.elbo
        for x, z in zip(a.grad_theta.arrays(), b.grad_theta.arrays()):
            np.testing.assert_array_equal(x, z)

    def test_quadrature_convergence(self):
        rng = np.random.default_rng(4)
        net, config, likelihood, q, X, y, _ = desk_instance(rng, num_tasks=0)
        lo = objectives.assemble_objective(
            net, q, X, y, len(X), [], likelihood, gauss_hermite(20), config=config, seed=0
        ).elbo
        hi = objectives.assemble_objective(
            net, q, X, y, len(X), [], likelihood, gauss_hermite(40), config=config, seed=0
        ).elbo
        assert abs(lo - hi) <= 1e-7

    def test_empty_batch(self):
        rng = np.random.default_rng(5)
        net, config, likelihood, q, X, y, _ = desk_instance(rng, num_tasks=0)
        with pytest.raises(EmptyBatch):
            objectives.assemble_objective(
                net, q, X[:0], y[:0], 5, [], likelihood, QUAD, config=config, seed=0
            )

    def test_minibatch_scaling(self):
        rng = np.random.default_rng(6)
        net, config, likelihood, q, X, y, _ = desk_instance(rng, num_tasks=0)
        small = objectives.assemble_objective(
            net, q, X[:2], y[:2], task_size=20, summaries=[], likelihood=likelihood,
            quad=QUAD, config=config, seed=0,
        )
        base = objectives.assemble_objective(
            net, q, X[:2], y[:2], task_size=2, summaries=[], likelihood=likelihood,
            quad=QUAD, config=config, seed=0,
        )
        assert small.expected_loglik == pytest.approx(10 * base.expected_loglik, rel=1e-12)


def _objective_value(net, q, X, y, summary_list, likelihood, seed, config):
    return objectives.assemble_objective(
        net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=seed
    ).elbo


class TestAssembleObjectiveGradients:
    @pytest.mark.parametrize("kind", ["bernoulli-logit", "softmax"])
    @pytest.mark.parametrize("seed", range(3))
    def test_theta_gradients(self, kind, seed):
        rng = np.random.default_rng(300 + seed)
        likelihood = (
            objectives.Likelihood("bernoulli-logit", 2)
            if kind == "bernoulli-logit"
            else objectives.Likelihood("softmax", 3)
        )
        net, config, likelihood, q, X, y, summary_list = desk_instance(
            rng, num_tasks=1, likelihood=likelihood
        )
        report = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=7
        )
        numeric = finite_diff_param_grads(
            lambda n: _objective_value(n, q, X, y, summary_list, likelihood, 7, config), net
        )
        for a, n in zip(report.grad_theta.arrays(), numeric):
            assert_grads_close(a, n, rel=1e-4, context=f"{kind} seed {seed}")

    @pytest.mark.parametrize("kind", ["bernoulli-logit", "softmax"])
    @pytest.mark.parametrize("seed", range(3))
    def test_posterior_gradients(self, kind, seed):
        rng = np.random.default_rng(400 + seed)
        likelihood = (
            objectives.Likelihood("bernoulli-logit", 2)
            if kind == "bernoulli-logit"
            else objectives.Likelihood("softmax", 3)
        )
        net, config, likelihood, q, X, y, summary_list = desk_instance(
            rng, num_tasks=1, likelihood=likelihood
        )
        report = objectives.assemble_objective(
            net, q, X, y, len(X), summary_list, likelihood, QUAD, config=config, seed=7
        )
        numeric_mu = finite_diff_array_grad(
            lambda: _objective_value(net, q, X, y, summary_list, likelihood, 7, config), q.mu
        )
        assert_grads_close(report.grad_mu, numeric_mu, rel=1e-4, context=f"mu {kind}")
        numeric_L = finite_diff_array_grad(
            lambda: _objective_value(net, q, X, y, summary_list, likelihood, 7, config), q.L_raw
        )
        assert_grads_close(
            report.grad_L_raw, np.tril(numeric_L), rel=1e-4, context=f"L {kind}"
        )
