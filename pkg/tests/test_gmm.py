import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gmm
from lagkit.errors import ContractError, InsufficientDataError
from lagkit.gmm import (
    AdaptationConfig,
    DiagonalGmm,
    EmConfig,
    SufficientStats,
    accumulate_stats,
    component_posteriors,
    log_likelihood,
    map_adapt,
    train_ubm_em,
)

mpmath.mp.dps = 40


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def mp_weighted_densities(model, x):
    """w_k N(x; mu_k, sigma_k) in 40-digit arithmetic, straight from the density formula."""
    out = []
    for k in range(model.K):
        dens = mpmath.mpf(model.weights[k])
        for d in range(model.D):
            s = mpmath.mpf(model.stds[k, d])
            z = (mpmath.mpf(x[d]) - mpmath.mpf(model.means[k, d])) / s
            dens *= mpmath.exp(-z * z / 2) / (s * mpmath.sqrt(2 * mpmath.pi))
        out.append(dens)
    return out


def mp_posteriors(model, x):
    dens = mp_weighted_densities(model, x)
    total = mpmath.fsum(dens)
    return np.array([float(d / total) for d in dens])


def mp_log_likelihood(model, X):
    return float(mpmath.fsum(mpmath.log(mpmath.fsum(mp_weighted_densities(model, x))) for x in X))


def brute_force_stats(model, X):
    """Per-patch loops over posteriors from the extended-precision oracle."""
    K, D = model.K, model.D
    n = np.zeros(K)
    s1 = np.zeros((K, D))
    s2 = np.zeros((K, D))
    for x in X:
        post = mp_posteriors(model, x)
        for k in range(K):
            n[k] += post[k]
            for d in range(D):
                s1[k, d] += post[k] * x[d]
                s2[k, d] += post[k] * x[d] * x[d]
    return n, s1 / n[:, None], s2 / n[:, None]


def transcribe_map(ubm, n, E1, E2, T, r):
    """Plain transcription of the adaptation formulas, no rearrangement."""
    K, D = ubm.K, ubm.D
    alpha = [n[k] / (n[k] + r) for k in range(K)]
    raw = [alpha[k] * n[k] / T + (1 - alpha[k]) * ubm.weights[k] for k in range(K)]
    gamma = 1.0 / sum(raw)
    w = np.array([raw[k] * gamma for k in range(K)])
    mu = np.zeros((K, D))
    sd = np.zeros((K, D))
    for k in range(K):
        for d in range(D):
            mb, sb = ubm.means[k, d], ubm.stds[k, d]
            mu[k, d] = alpha[k] * E1[k, d] + (1 - alpha[k]) * mb
            var = alpha[k] * E2[k, d] + (1 - alpha[k]) * (sb**2 + mb**2) - mu[k, d] ** 2
            sd[k, d] = math.sqrt(var)
    return w, mu, sd, np.array(alpha), gamma


# ---------------------------------------------------------------------------
# DiagonalGmm
# ---------------------------------------------------------------------------


class TestDiagonalGmm:
    def test_rejects_bad_weights(self):
        with pytest.raises(ContractError):
            DiagonalGmm([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1)))
        with pytest.raises(ContractError):
            DiagonalGmm([1.5, -0.5], np.zeros((2, 1)), np.ones((2, 1)))

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ContractError):
            DiagonalGmm([1.0], [[0.0, 1.0]], [[1.0, 0.0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ContractError):
            DiagonalGmm([0.5, 0.5], np.zeros((2, 3)), np.ones((2, 2)))

    def test_parameters_are_read_only(self):
        g = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        with pytest.raises(ValueError):
            g.means[0, 0] = 3.0


# ---------------------------------------------------------------------------
# posteriors and likelihood
# ---------------------------------------------------------------------------


class TestPosteriors:
    def test_single_component_is_one(self, rng):
        g = random_gmm(rng, 1, 3)
        np.testing.assert_array_equal(component_posteriors(g, rng.normal(size=3)), [1.0])

    def test_symmetric_pair(self):
        g = DiagonalGmm([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], np.ones((2, 2)))
        np.testing.assert_allclose(component_posteriors(g, [0.0, 0.7]), [0.5, 0.5], atol=1e-15)

    def test_extended_precision_oracle(self):
        g = DiagonalGmm([0.3, 0.7], [[0.0], [1.0]], [[1.0], [1.0]])
        expected = mp_posteriors(g, [0.5])
        # closed form here: densities at equal distance, so the posterior is the weight
        np.testing.assert_allclose(expected, [0.3, 0.7], atol=1e-15)
        np.testing.assert_allclose(component_posteriors(g, [0.5]), expected, atol=1e-14)

    def test_random_against_oracle(self, rng):
        for _ in range(10):
            g = random_gmm(rng, 4, 3)
            x = rng.normal(0, 3, 3)
            np.testing.assert_allclose(component_posteriors(g, x), mp_posteriors(g, x), atol=1e-12)

    def test_far_patch_does_not_underflow(self):
        g = DiagonalGmm([0.5, 0.5], [[0.0], [1.0]], [[0.01], [0.01]])
        p = component_posteriors(g, [500.0])
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [0.0, 1.0], atol=1e-300)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ContractError):
            component_posteriors(random_gmm(rng, 2, 3), [1.0, 2.0])

    @settings(max_examples=200, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        K=st.integers(1, 12),
        D=st.integers(1, 6),
        scale=st.floats(0.1, 50.0),
    )
    def test_sums_to_one(self, seed, K, D, scale):
        r = np.random.default_rng(seed)
        g = random_gmm(r, K, D, std_range=(0.05, 3.0))
        p = component_posteriors(g, r.normal(0, scale, D))
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12


class TestLogLikelihood:
    def test_empty(self, rng):
        assert log_likelihood(random_gmm(rng, 3, 2), np.zeros((0, 2))) == 0.0

    def test_standard_normal_at_mode(self):
        g = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        assert log_likelihood(g, [[0.0]]) == pytest.approx(-0.9189385332046727, abs=1e-15)

    def test_against_oracle(self, rng):
        g = random_gmm(rng, 5, 3)
        X = rng.normal(0, 2, (20, 3))
        assert log_likelihood(g, X) == pytest.approx(mp_log_likelihood(g, X), rel=1e-12)


# ---------------------------------------------------------------------------
# sufficient statistics
# ---------------------------------------------------------------------------


class TestAccumulateStats:
    def test_empty_input_uses_ubm_moments(self, rng):
        g = random_gmm(rng, 3, 2)
        s = accumulate_stats(g, np.zeros((0, 2)))
        assert s.total_patches == 0
        np.testing.assert_array_equal(s.counts, 0.0)
        np.testing.assert_array_equal(s.mean_acc, g.means)
        np.testing.assert_array_equal(s.sqmean_acc, g.stds**2 + g.means**2)

    def test_single_component(self, rng):
        g = random_gmm(rng, 1, 3)
        p1, p2 = rng.normal(size=3), rng.normal(size=3)
        s = accumulate_stats(g, np.vstack([p1, p2]))
        np.testing.assert_allclose(s.counts, [2.0])
        np.testing.assert_allclose(s.mean_acc[0], (p1 + p2) / 2)
        np.testing.assert_allclose(s.sqmean_acc[0], (p1**2 + p2**2) / 2)

    def test_k2_d1_brute_force(self, rng):
        g = random_gmm(rng, 2, 1)
        X = rng.normal(0, 2, (7, 1))
        n, e1, e2 = brute_force_stats(g, X)
        s = accumulate_stats(g, X)
        np.testing.assert_allclose(s.counts, n, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(s.mean_acc, e1, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(s.sqmean_acc, e2, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_brute_force_property(self, seed):
        r = np.random.default_rng(seed)
        K, D, T = int(r.integers(1, 9)), int(r.integers(1, 5)), int(r.integers(1, 51))
        g = random_gmm(r, K, D)
        X = r.normal(0, 2.5, (T, D))
        n, e1, e2 = brute_force_stats(g, X)
        s = accumulate_stats(g, X)
        live = n >= 1e-10
        np.testing.assert_allclose(s.counts, n, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(s.mean_acc[live], e1[live], rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(s.sqmean_acc[live], e2[live], rtol=1e-9, atol=1e-9)

    def test_invariants(self, rng):
        g = random_gmm(rng, 6, 3)
        X = rng.normal(0, 2, (300, 3))
        s = accumulate_stats(g, X)
        assert abs(s.counts.sum() - s.total_patches) <= 1e-8
        live = s.counts > 0
        assert np.all(s.sqmean_acc[live] >= s.mean_acc[live] ** 2 - 1e-8)

    def test_merge_matches_single_pass(self, rng):
        g = random_gmm(rng, 5, 3)
        X = rng.normal(0, 2, (400, 3))
        whole = accumulate_stats(g, X)
        parts = accumulate_stats(g, X[:130]).merge(accumulate_stats(g, X[130:]))
        assert parts.total_patches == whole.total_patches
        np.testing.assert_allclose(parts.counts, whole.counts, rtol=1e-9)
        np.testing.assert_allclose(parts.mean_acc, whole.mean_acc, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(parts.sqmean_acc, whole.sqmean_acc, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# MAP adaptation
# ---------------------------------------------------------------------------


class TestMapAdapt:
    def test_zero_counts_returns_ubm(self, rng):
        ubm = random_gmm(rng, 4, 3)
        model, diag = map_adapt(ubm, accumulate_stats(ubm, np.zeros((0, 3))))
        assert model == ubm
        assert diag["gamma"] == 1.0
        np.testing.assert_array_equal(diag["alphas"], 0.0)

    def test_alpha_half_substitution(self):
        ubm = DiagonalGmm([1.0], [[2.0]], [[1.0]])
        stats = SufficientStats(np.array([16.0]), np.array([[4.0]]), np.array([[17.0]]), 16)
        model, diag = map_adapt(ubm, stats, AdaptationConfig(relevance=16.0))
        assert diag["alphas"][0] == 0.5
        assert model.means[0, 0] == 3.0

    def test_against_transcription_oracle(self, rng):
        ubm = random_gmm(rng, 2, 2)
        X = rng.normal(0, 2, (10, 2))
        n, e1, e2 = brute_force_stats(ubm, X)
        w, mu, sd, alpha, gamma = transcribe_map(ubm, n, e1, e2, 10, 16.0)
        model, diag = map_adapt(ubm, accumulate_stats(ubm, X), AdaptationConfig(relevance=16.0))
        np.testing.assert_allclose(model.weights, w, rtol=1e-10)
        np.testing.assert_allclose(model.means, mu, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(model.stds, sd, rtol=1e-9)
        np.testing.assert_allclose(diag["alphas"], alpha, rtol=1e-10)
        assert diag["gamma"] == pytest.approx(gamma, rel=1e-12)

    def test_huge_relevance_stays_at_ubm(self, rng):
        ubm = random_gmm(rng, 6, 4)
        X = rng.normal(0, 3, (500, 4))
        model, _ = map_adapt(ubm, accumulate_stats(ubm, X), AdaptationConfig(relevance=1e12))
        for a, b in ((model.weights, ubm.weights), (model.means, ubm.means), (model.stds, ubm.stds)):
            assert np.max(np.abs(a - b)) <= 1e-6

    def test_flags_off_returns_ubm_exactly(self, rng):
        ubm = random_gmm(rng, 3, 2)
        cfg = AdaptationConfig(adapt_weights=False, adapt_means=False, adapt_stds=False)
        model, _ = map_adapt(ubm, accumulate_stats(ubm, rng.normal(size=(40, 2))), cfg)
        assert model == ubm

    def test_mean_only(self, rng):
        ubm = random_gmm(rng, 3, 2)
        cfg = AdaptationConfig(adapt_weights=False, adapt_stds=False)
        model, _ = map_adapt(ubm, accumulate_stats(ubm, rng.normal(size=(40, 2))), cfg)
        np.testing.assert_array_equal(model.stds, ubm.stds)
        np.testing.assert_array_equal(model.weights, ubm.weights)
        assert not np.array_equal(model.means, ubm.means)

    def test_negative_variance_is_floored(self):
        ubm = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        # inconsistent second moment (E[s^2] < E[s]^2) drives the variance negative
        stats = SufficientStats(np.array([1e6]), np.array([[5.0]]), np.array([[1.0]]), 1_000_000)
        model, _ = map_adapt(ubm, stats, AdaptationConfig(variance_floor=1e-4))
        assert model.stds[0, 0] == pytest.approx(1e-2)

    def test_mismatched_stats(self, rng):
        ubm = random_gmm(rng, 3, 2)
        other = random_gmm(rng, 4, 2)
        with pytest.raises(ContractError):
            map_adapt(ubm, accumulate_stats(other, rng.normal(size=(5, 2))))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), r=st.floats(1e-6, 1e6))
    def test_weights_normalized(self, seed, r):
        g = np.random.default_rng(seed)
        K, D = int(g.integers(1, 10)), int(g.integers(1, 4))
        ubm = random_gmm(g, K, D)
        X = g.normal(0, 3, (int(g.integers(1, 60)), D))
        model, _ = map_adapt(ubm, accumulate_stats(ubm, X), AdaptationConfig(relevance=r))
        assert abs(model.weights.sum() - 1.0) <= 1e-10
        assert np.all(model.stds >= math.sqrt(1e-4) * (1 - 1e-12))


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class TestTrainUbm:
    def test_single_component_closed_form(self, rng):
        X = rng.normal([1.0, -2.0], [0.5, 3.0], (500, 2))
        model, trace = train_ubm_em(X, 1, EmConfig(max_iterations=1))
        assert len(trace) == 1
        np.testing.assert_array_equal(model.weights, [1.0])
        np.testing.assert_allclose(model.means[0], X.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(model.stds[0], X.std(axis=0), rtol=1e-10)

    def test_single_component_std_floor(self):
        X = np.ones((10, 2))
        model, _ = train_ubm_em(X, 1, EmConfig(variance_floor=1e-4))
        np.testing.assert_allclose(model.stds, 1e-2)

    def test_recovers_separated_clusters(self):
        rng = np.random.default_rng(7)
        centers = np.array([[-5.0, 0.0, 2.0], [5.0, 1.0, -2.0]])
        X = np.vstack([rng.normal(c, 0.5, (1000, 3)) for c in centers])
        model, _ = train_ubm_em(X, 2, EmConfig(seed=3))
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order], centers, atol=0.1)
        np.testing.assert_allclose(model.weights, 0.5, atol=0.01)

    @pytest.mark.parametrize("seed", range(5))
    def test_trace_monotone(self, seed):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(rng.normal(0, 3, 3), rng.uniform(0.2, 2), (300, 3)) for _ in range(4)])
        _, trace = train_ubm_em(X, 6, EmConfig(seed=seed, max_iterations=60, ll_tolerance=1e-12))
        for prev, cur in zip(trace, trace[1:]):
            assert cur >= prev - 1e-8 * abs(prev)

    def test_deterministic(self, rng):
        X = rng.normal(size=(400, 2))
        a, ta = train_ubm_em(X, 4, EmConfig(seed=11))
        b, tb = train_ubm_em(X, 4, EmConfig(seed=11))
        assert a == b and ta == tb

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError, match="insufficient data for K components"):
            train_ubm_em(np.zeros((3, 2)), 4)

    def test_stops_on_tolerance(self, rng):
        X = rng.normal(size=(500, 2))
        _, trace = train_ubm_em(X, 2, EmConfig(max_iterations=500, ll_tolerance=1e-3))
        assert len(trace) < 500
