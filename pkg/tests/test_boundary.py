"""Surprise scores, Welch's t, and detector gating."""

import numpy as np
import pytest

from frcl import boundary, features, objectives
from frcl.errors import DegeneratePrior, ZeroVariance
from frcl.kernel import KernelConfig

from oracles import random_net
from test_objectives import random_posterior


def grid_symmetrised_kl(m1, v1, m2, v2):
    """Numeric integration of both KL integrals on a dense grid."""
    lo = min(m1 - 10 * np.sqrt(v1), m2 - 10 * np.sqrt(v2))
    hi = max(m1 + 10 * np.sqrt(v1), m2 + 10 * np.sqrt(v2))
    x = np.linspace(lo, hi, 400_001)

    def logpdf(x, m, v):
        return -0.5 * ((x - m) ** 2 / v + np.log(2 * np.pi * v))

    q = np.exp(logpdf(x, m1, v1))
    p = np.exp(logpdf(x, m2, v2))
    dq = logpdf(x, m1, v1) - logpdf(x, m2, v2)
    kl_qp = np.trapezoid(q * dq, x)
    kl_pq = np.trapezoid(p * (-dq), x)
    return 0.5 * (kl_qp + kl_pq)


class TestSurprise:
    def test_zero_when_posterior_equals_prior(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, sizes=[3, 5, 4])
        config = KernelConfig(1.0)
        q = objectives.init_posterior(net.feature_dim, 1, seed=0)
        q.mu[:] = 0.0  # exact prior: mu = 0, L = I, sigma_w2 = 1
        X = rng.uniform(0.5, 1.5, size=(6, 3))
        scores = boundary.surprise(q, net, config, X)
        assert np.all(scores.ell >= 0.0)
        assert np.all(scores.ell <= 1e-6)

    def test_equal_variance_mean_shift(self):
        # q = N(mu, v) vs p = N(0, v): symmetrised KL = mu^2 / (2 v)
        net = features.FeatureNet(weights=[np.eye(1)], biases=[np.zeros(1)])
        config = KernelConfig(1.0)
        x_val = 1.7
        mu_w = 0.8
        q = objectives.WeightPosterior(
            mu=np.array([[mu_w]]),
            L_raw=np.array([[[objectives.softplus_inv(1.0)]]]),  # L = 1
        )
        # posterior var = x^2, prior var = x^2; posterior mean = mu_w * x
        scores = boundary.surprise(q, net, config, np.array([[x_val]]))
        expected = (mu_w * x_val) ** 2 / (2 * x_val**2)
        assert scores.ell[0, 0] == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_numeric_integration_oracle(self, seed):
        rng = np.random.default_rng(10 + seed)
        net = random_net(rng, sizes=[3, 6, 5])
        config = KernelConfig(1.0)
        q = random_posterior(rng, net.feature_dim)
        X = rng.uniform(0.2, 1.5, size=(4, 3))
        scores = boundary.surprise(q, net, config, X)
        Phi = features.forward(net, X)
        means, variances, _, _ = objectives.marginal_moments(Phi, q)
        for i in range(4):
            prior_v = float(Phi[i] @ Phi[i])
            expected = grid_symmetrised_kl(
                means[i, 0], variances[i, 0] + 1e-10, 0.0, prior_v
            )
            assert scores.ell[0, i] == pytest.approx(expected, abs=1e-6, rel=1e-6)

    def test_degenerate_prior_rejected(self):
        net = features.FeatureNet(weights=[np.eye(2)], biases=[np.zeros(2)])
        config = KernelConfig(1.0)
        q = objectives.init_posterior(2, 1, seed=0)
        with pytest.raises(DegeneratePrior):
            boundary.surprise(q, net, config, np.array([[-1.0, -2.0]]))  # ReLU zeroes all


class TestWelchT:
    def test_identical_samples(self):
        a = np.array([0.3, 1.2, 0.9, 2.0])
        assert boundary.welch_t(a, a) == 0.0

    def test_hand_value(self):
        a = np.array([1.0, 1.0, 1.0, 3.0])
        b = np.array([3.0, 3.0, 3.0, 5.0])
        assert boundary.welch_t(a, b) == pytest.approx(2 * np.sqrt(2), rel=1e-12)

    def test_null_distribution_centred(self):
        rng = np.random.default_rng(0)
        ts = [
            boundary.welch_t(rng.standard_normal(50), rng.standard_normal(50))
            for _ in range(10_000)
        ]
        assert abs(np.mean(ts)) <= 3.0 / np.sqrt(len(ts))  # Var(t) ~ 1

    def test_zero_variance_cases(self):
        assert boundary.welch_t(np.ones(3), np.ones(4)) == 0.0
        with pytest.raises(ZeroVariance):
            boundary.welch_t(np.ones(3), np.full(3, 2.0))

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            boundary.welch_t(np.ones(1), np.ones(5))


def scores_from(values) -> boundary.SurpriseScores:
    return boundary.SurpriseScores(ell=np.atleast_2d(np.asarray(values, dtype=np.float64)))


class TestDetectorStep:
    def test_first_batch_never_detects(self):
        state = boundary.DetectorState(threshold=0.001, min_time_in=0)
        state, detected, statistic = boundary.step(state, scores_from([5.0, 6.0, 7.0]))
        assert not detected
        assert statistic == 0.0

    def test_identical_batches_no_detection(self):
        state = boundary.DetectorState(threshold=0.5, min_time_in=0)
        batch = scores_from([5.0, 6.0, 7.0, 8.0])
        boundary.step(state, batch)
        state, detected, statistic = boundary.step(state, batch)
        assert statistic == 0.0
        assert not detected

    def _drive(self, state, high_steps=30, low_value=1e-4):
        rng = np.random.default_rng(0)
        results = []
        for _ in range(high_steps):
            batch = scores_from(10.0 + rng.uniform(0, 1, size=16))
            results.append(boundary.step(state, batch)[1:])
        low = scores_from(low_value * (1 + rng.uniform(0, 1, size=16)))
        results.append(boundary.step(state, low)[1:])
        return results

    def test_detects_score_collapse(self):
        state = boundary.DetectorState(threshold=5.0, min_time_in=10)
        results = self._drive(state)
        *before, last = results
        assert not any(d for d, _ in before)
        assert last[0]
        assert last[1] > 5.0

    def test_min_time_in_gates(self):
        state = boundary.DetectorState(threshold=1.0, min_time_in=50)
        results = self._drive(state, high_steps=30)
        assert not any(d for d, _ in results)  # 31 steps < 50

    def test_cooldown_gates(self):
        state = boundary.DetectorState(threshold=5.0, min_time_in=2)
        rng = np.random.default_rng(1)
        for _ in range(10):
            boundary.step(state, scores_from(10.0 + rng.uniform(0, 1, 16)))
        state, detected, _ = boundary.step(state, scores_from(1e-4 * (1 + rng.uniform(0, 1, 16))))
        assert detected
        assert state.cooldown_remaining == 10
        # ten further drastic shifts are ignored during cooldown
        fired = []
        for k in range(10):
            level = 10.0 ** (-6 - k)
            state, det, _ = boundary.step(state, scores_from(level * (1 + rng.uniform(0, 1, 16))))
            fired.append(det)
        assert not any(fired)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        base = 10.0 + rng.uniform(0, 1, 16)
        new = 0.01 * (1 + rng.uniform(0, 1, 16))
        s1 = boundary.DetectorState(threshold=5.0, min_time_in=0)
        boundary.step(s1, scores_from(base))
        _, d1, t1 = boundary.step(s1, scores_from(new))
        s2 = boundary.DetectorState(threshold=5.0, min_time_in=0)
        boundary.step(s2, scores_from(base[::-1].copy()))
        _, d2, t2 = boundary.step(s2, scores_from(new[::-1].copy()))
        assert (d1, t1) == (d2, t2)

    def test_orientation_smaller_scores_positive_statistic(self):
        rng = np.random.default_rng(3)
        base = 4.0 + rng.uniform(0, 1, 32)
        state = boundary.DetectorState(threshold=100.0, min_time_in=0, log_space=True)
        boundary.step(state, scores_from(base))
        _, _, statistic = boundary.step(state, scores_from(0.25 * base))
        assert statistic > 0.0

    def test_window_accumulates_reference(self):
        rng = np.random.default_rng(4)
        state = boundary.DetectorState(threshold=5.0, min_time_in=0, window=3)
        for _ in range(5):
            boundary.step(state, scores_from(10 + rng.uniform(0, 1, 8)))
        assert len(state.ell_old) == 3
        assert state.ell_old[0].shape == (1, 8)

    def test_multifunction_max_aggregation(self):
        rng = np.random.default_rng(5)
        stable = 10.0 + rng.uniform(0, 1, (3, 16))
        state = boundary.DetectorState(threshold=5.0, min_time_in=0, aggregation="max")
        boundary.step(state, boundary.SurpriseScores(ell=stable))
        moved = stable.copy()
        moved[1] *= 1e-4  # only one function's scores collapse
        _, detected, statistic = boundary.step(state, boundary.SurpriseScores(ell=moved))
        assert detected
        assert statistic > 5.0
