"""分数缩放、Beta 拟合、混合矩匹配与离散化。"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from scripts.errors import BetaFitError, ScoreRangeError
from scripts.score_prior import (
    BetaParams,
    DiscretePrior,
    ScoreRange,
    SourceStatistics,
    beta_log_likelihood,
    build_prior,
    compute_source_statistics,
    discretize,
    fit_beta_mle,
    load_statistics,
    save_statistics,
    scale_scores,
    unify_betas,
)


class TestScaleScores:
    def test_interior(self):
        assert scale_scores([2], ScoreRange(0, 3))[0] == pytest.approx(0.625)

    def test_minimum(self):
        assert scale_scores([1], ScoreRange(1, 6))[0] == pytest.approx(0.5 / 6)

    def test_maximum_of_wide_range(self):
        assert scale_scores([60], ScoreRange(0, 60))[0] == pytest.approx(60.5 / 61)

    def test_out_of_range(self):
        with pytest.raises(ScoreRangeError):
            scale_scores([4], ScoreRange(0, 3))

    def test_single_class_range_rejected(self):
        with pytest.raises(ScoreRangeError):
            ScoreRange(2, 2)


class TestFitBetaMle:
    def test_symmetric_samples(self):
        params = fit_beta_mle([0.2, 0.8, 0.4, 0.6])
        assert params.alpha == pytest.approx(params.beta, abs=1e-6)

    @pytest.mark.parametrize("alpha,beta", [(2, 5), (3, 3), (1.2, 4), (6, 2)])
    def test_recovers_parameters(self, alpha, beta):
        samples = np.random.default_rng(1234).beta(alpha, beta, size=50_000)
        params = fit_beta_mle(samples)
        assert params.alpha == pytest.approx(alpha, rel=0.05)
        assert params.beta == pytest.approx(beta, rel=0.05)

    def test_symmetric_mean(self):
        samples = np.random.default_rng(5).beta(3, 3, size=50_000)
        assert fit_beta_mle(samples).mean == pytest.approx(0.5, abs=0.005)

    def test_is_a_likelihood_maximum(self):
        samples = np.random.default_rng(9).beta(2, 5, size=2_000)
        params = fit_beta_mle(samples)
        best = beta_log_likelihood(samples, params)
        for da, db in [(0.05, 0), (-0.05, 0), (0, 0.05), (0, -0.05)]:
            nearby = BetaParams(params.alpha + da, params.beta + db)
            assert beta_log_likelihood(samples, nearby) <= best

    def test_agrees_with_scipy_fit(self):
        samples = np.random.default_rng(2).beta(1.5, 3.5, size=5_000)
        alpha, beta, _, _ = stats.beta.fit(samples, floc=0, fscale=1)
        params = fit_beta_mle(samples)
        assert params.alpha == pytest.approx(alpha, rel=1e-3)
        assert params.beta == pytest.approx(beta, rel=1e-3)

    @pytest.mark.parametrize("alpha,beta,seed", [(0.6, 0.8, 0), (2, 5, 1), (9, 1.5, 2), (40, 40, 3)])
    def test_not_worse_than_method_of_moments(self, alpha, beta, seed):
        samples = np.random.default_rng(seed).beta(alpha, beta, size=300)
        mean, var = samples.mean(), samples.var()
        common = mean * (1 - mean) / var - 1
        moments = BetaParams(mean * common, (1 - mean) * common)
        assert beta_log_likelihood(samples, fit_beta_mle(samples)) >= beta_log_likelihood(samples, moments) - 1e-12

    def test_too_few_samples(self):
        with pytest.raises(BetaFitError):
            fit_beta_mle([0.3])

    def test_identical_samples(self):
        with pytest.raises(BetaFitError):
            fit_beta_mle([0.4, 0.4, 0.4])


def _mixture_moments(params):
    means = np.array([p.mean for p in params])
    second = np.array([p.variance + p.mean ** 2 for p in params])
    mu = means.mean()
    return mu, second.mean() - mu ** 2


class TestUnifyBetas:
    def test_identical_components(self):
        unified = unify_betas([BetaParams(2, 2), BetaParams(2, 2)])
        assert unified.alpha == pytest.approx(2.0, abs=1e-12)
        assert unified.beta == pytest.approx(2.0, abs=1e-12)

    def test_mirrored_components(self):
        unified = unify_betas([BetaParams(1, 3), BetaParams(3, 1)])
        assert unified.alpha == pytest.approx(0.75, abs=1e-12)
        assert unified.beta == pytest.approx(0.75, abs=1e-12)

    def test_single_component_identity(self):
        unified = unify_betas([BetaParams(2.7, 0.9)])
        assert unified.alpha == pytest.approx(2.7, abs=1e-12)
        assert unified.beta == pytest.approx(0.9, abs=1e-12)

    def test_moments_match_mixture(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(1, 9))
            params = [BetaParams(*rng.uniform(0.5, 20, 2)) for _ in range(m)]
            mu, var = _mixture_moments(params)
            unified = unify_betas(params)
            assert unified.mean == pytest.approx(mu, abs=1e-12)
            assert unified.variance == pytest.approx(var, abs=1e-12)

    def test_empty(self):
        with pytest.raises(BetaFitError):
            unify_betas([])


class TestDiscretize:
    def test_uniform_density(self):
        np.testing.assert_allclose(discretize(BetaParams(1, 1), ScoreRange(0, 3)).probs, [0.25] * 4, atol=1e-12)

    def test_symmetric_two_bins(self):
        np.testing.assert_allclose(discretize(BetaParams(2, 2), ScoreRange(0, 1)).probs, [0.5, 0.5], atol=1e-12)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(4)
        cases = [(0.75, 0.75, 3)] + [
            (*rng.uniform(0.5, 10, 2), int(rng.integers(2, 12))) for _ in range(50)
        ]
        for alpha, beta, c in cases:
            probs = discretize(BetaParams(alpha, beta), ScoreRange(0, c - 1)).probs
            for k in range(c):
                mass, _ = integrate.quad(
                    stats.beta(alpha, beta).pdf, k / c, (k + 1) / c, epsabs=1e-12, epsrel=1e-12, limit=200
                )
                assert probs[k] == pytest.approx(mass, abs=1e-7)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.05, 50), st.floats(0.05, 50), st.integers(2, 30), st.integers(2, 4))
    def test_refined_bins_aggregate_to_coarse(self, alpha, beta, c, factor):
        prior = BetaParams(alpha, beta)
        coarse = discretize(prior, ScoreRange(0, c - 1)).probs
        fine = discretize(prior, ScoreRange(0, c * factor - 1)).probs
        np.testing.assert_allclose(fine.reshape(c, factor).sum(axis=1), coarse, rtol=0, atol=1e-9)

    @settings(max_examples=1000, deadline=None)
    @given(st.floats(0.05, 50), st.floats(0.05, 50), st.integers(2, 61))
    def test_sums_to_one(self, alpha, beta, c):
        probs = discretize(BetaParams(alpha, beta), ScoreRange(0, c - 1)).probs
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert np.all(probs >= 0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 30), st.integers(2, 12))
    def test_palindrome_when_symmetric(self, alpha, c):
        probs = discretize(BetaParams(alpha, alpha), ScoreRange(1, c)).probs
        np.testing.assert_allclose(probs, probs[::-1], atol=1e-12)


class TestBuildPrior:
    def _stats(self, source_id, alpha, beta, score_range=ScoreRange(0, 3)):
        return SourceStatistics(source_id, score_range, BetaParams(alpha, beta), 100)

    def test_uniform_source(self):
        prior = build_prior([self._stats("s0", 1, 1)], ScoreRange(0, 4))
        np.testing.assert_allclose(prior.probs, DiscretePrior.uniform(ScoreRange(0, 4)).probs, atol=1e-12)

    def test_composition(self):
        stats_list = [self._stats("s0", 1, 3), self._stats("s1", 3, 1)]
        prior = build_prior(stats_list, ScoreRange(0, 2))
        expected = discretize(BetaParams(0.75, 0.75), ScoreRange(0, 2))
        np.testing.assert_allclose(prior.probs, expected.probs, atol=1e-12)

    def test_permutation_invariant(self):
        stats_list = [self._stats(f"s{j}", a, b) for j, (a, b) in enumerate([(2, 5), (4, 1.5), (3, 3)])]
        forward = build_prior(stats_list, ScoreRange(0, 5))
        backward = build_prior(stats_list[::-1], ScoreRange(0, 5))
        np.testing.assert_array_equal(forward.probs, backward.probs)


class TestSourceStatistics:
    def test_keeps_no_raw_scores(self, tmp_path):
        scores = np.random.default_rng(0).integers(0, 4, size=200)
        stats_obj = compute_source_statistics("source_0", scores, ScoreRange(0, 3))
        path = save_statistics(stats_obj, tmp_path / "s.json")
        assert set(stats_obj.to_dict()) == {"source_id", "range", "alpha", "beta", "n"}
        loaded = load_statistics(path)
        assert loaded == stats_obj
        assert loaded.n == 200
