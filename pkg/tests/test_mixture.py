"""Tests for the Gaussian-Wishart mixture: conjugate algebra, E-step, missing data, labels."""

import numpy as np
import pytest
from scipy import optimize, special

from atlas_toolkit.core.errors import InvalidInputError
from atlas_toolkit.mixture import (
    GaussWishartBundle,
    LabelData,
    SufficientStats,
    default_prior,
    e_step,
    expected_log_likelihood,
    fit_intensity_hyperpriors,
    fit_mixture,
    infer_missing,
    m_step,
    mixture_bound,
    sufficient_stats,
    tissue_weight_objective,
    update_tissue_weights,
    warped_prior,
)
from atlas_toolkit.mixture.gauss_wishart import LOG_2PI


def _bundle_1d(m=0.0, beta=1.0, W=1.0, nu=2.0):
    return GaussWishartBundle(np.array([[m]]), np.array([beta]), np.array([[[W]]]), np.array([nu]))


def _bundle_2d(K=2, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0, 10, size=(K, 2))
    W = np.stack([np.array([[0.5, 0.1], [0.1, 0.3]]) * (k + 1) for k in range(K)])
    return GaussWishartBundle(m, np.full(K, 2.0), W, np.full(K, 5.0))


def _two_clusters(n=200, seed=0):
    rng = np.random.default_rng(seed)
    values = np.concatenate([rng.normal(0.0, 1.0, n), rng.normal(10.0, 1.0, n)])[:, None]
    return values, np.ones_like(values, dtype=bool)


# ---------------------------------------------------------------------------
# Bundle validation and moments
# ---------------------------------------------------------------------------


class TestBundle:
    def test_rejects_bad_parameters(self):
        with pytest.raises(InvalidInputError, match="beta"):
            _bundle_1d(beta=0.0)
        with pytest.raises(InvalidInputError, match="nu"):
            GaussWishartBundle(np.zeros((1, 2)), [1.0], np.eye(2)[None], [1.0])
        with pytest.raises(InvalidInputError, match="positive-definite"):
            GaussWishartBundle(np.zeros((1, 2)), [1.0], -np.eye(2)[None], [3.0])

    def test_kl_to_self_is_zero(self):
        bundle = _bundle_2d()
        np.testing.assert_allclose(bundle.kl_to(bundle), 0.0, atol=1e-10)

    def test_kl_is_positive(self):
        a, b = _bundle_2d(seed=1), _bundle_2d(seed=2)
        assert np.all(a.kl_to(b) > 0)

    def test_expected_log_det_1d(self):
        # E[log lambda] for lambda ~ Gamma(nu/2, 2W)
        bundle = _bundle_1d(W=0.3, nu=4.0)
        expected = special.digamma(2.0) + np.log(2.0) + np.log(0.3)
        assert bundle.expected_log_det()[0] == pytest.approx(expected)

    def test_dict_roundtrip_values(self):
        bundle = _bundle_2d()
        back = GaussWishartBundle.from_dict(bundle.to_dict())
        np.testing.assert_array_equal(back.W, bundle.W)
        np.testing.assert_array_equal(back.m, bundle.m)


# ---------------------------------------------------------------------------
# M-step and priors
# ---------------------------------------------------------------------------


class TestMStep:
    def test_closed_form_1d(self):
        # x = 1, 2, 3
        stats = SufficientStats(np.array([3.0]), np.array([[6.0]]), np.array([[[14.0]]]))
        post, flags = m_step(stats, _bundle_1d())
        assert flags == []
        assert post.beta[0] == pytest.approx(4.0)
        assert post.m[0, 0] == pytest.approx(1.5)
        assert post.nu[0] == pytest.approx(5.0)
        assert post.W[0, 0, 0] == pytest.approx(1.0 / 6.0)

    def test_empty_class_copies_prior(self):
        prior = _bundle_2d()
        stats = SufficientStats(np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2, 2)))
        post, _ = m_step(stats, prior)
        np.testing.assert_array_equal(post.W, prior.W)
        np.testing.assert_array_equal(post.m, prior.m)

    def test_default_prior_quantiles(self):
        values = np.arange(100, dtype=np.float64)[:, None]
        prior = default_prior(values, np.ones_like(values, dtype=bool), classes=2)
        np.testing.assert_allclose(prior.m[:, 0], np.quantile(values, [0.25, 0.75]))
        assert prior.nu[0] == pytest.approx(1.0)

    def test_hyperpriors_match_population_moments(self):
        bundles = [_bundle_1d(m=float(s), W=(1.0 + 0.1 * s) / 10.0, nu=10.0) for s in range(1, 6)]
        hyper = fit_intensity_hyperpriors(bundles)
        assert hyper.m[0, 0] == pytest.approx(3.0)
        assert hyper.nu[0] == pytest.approx(115.2)
        assert hyper.nu[0] * hyper.W[0, 0, 0] == pytest.approx(1.2)
        # prior predictive variance of the mean matches the spread of subject means
        expected_cov = (1.0 / 1.2) * hyper.nu[0] / (hyper.nu[0] - 2.0)
        assert expected_cov / hyper.beta[0] == pytest.approx(2.5)

    def test_hyperpriors_need_two_subjects(self):
        with pytest.raises(InvalidInputError):
            fit_intensity_hyperpriors([_bundle_1d()])


# ---------------------------------------------------------------------------
# Likelihood, missing channels
# ---------------------------------------------------------------------------


class TestLikelihood:
    def test_fully_observed_closed_form(self):
        bundle = _bundle_2d()
        x = np.array([[3.0, 4.0], [8.0, 1.0]])
        out = expected_log_likelihood(x, np.ones_like(x, dtype=bool), bundle)
        for k in range(bundle.K):
            diff = x - bundle.m[k]
            quad = np.einsum("ni,ij,nj->n", diff, bundle.W[k], diff)
            expected = (
                0.5 * bundle.expected_log_det()[k]
                - LOG_2PI
                - 1.0 / bundle.beta[k]
                - 0.5 * bundle.nu[k] * quad
            )
            np.testing.assert_allclose(out[:, k], expected)

    def test_fully_missing_voxel_is_zero(self):
        bundle = _bundle_2d()
        x = np.zeros((1, 2))
        out = expected_log_likelihood(x, np.zeros((1, 2), dtype=bool), bundle)
        np.testing.assert_array_equal(out, 0.0)

    def test_infer_missing_is_conditional_mean(self):
        bundle = _bundle_2d()
        x = np.array([[2.0, 0.0]])
        post = infer_missing(x, np.array([True, False]), bundle)
        for k in range(bundle.K):
            lam = bundle.nu[k] * bundle.W[k]
            expected = bundle.m[k, 1] - lam[1, 0] / lam[1, 1] * (2.0 - bundle.m[k, 0])
            assert post.n[0, k, 0] == pytest.approx(expected)
            assert post.P[k, 0, 0] == pytest.approx(lam[1, 1])

    def test_infer_missing_needs_an_observation(self):
        with pytest.raises(InvalidInputError):
            infer_missing(np.zeros((1, 2)), np.array([False, False]), _bundle_2d())

    def test_missing_stats_add_posterior_covariance(self):
        bundle = _bundle_2d(K=1)
        x = np.array([[2.0, 0.0]])
        observed = np.array([[True, False]])
        stats = sufficient_stats(x, observed, np.ones((1, 1)), bundle)
        post = infer_missing(x, observed[0], bundle)
        n = post.n[0, 0, 0]
        assert stats.s0[0] == pytest.approx(1.0)
        np.testing.assert_allclose(stats.s1[0], [2.0, n])
        assert stats.S2[0, 1, 1] == pytest.approx(n * n + 1.0 / post.P[0, 0, 0])


# ---------------------------------------------------------------------------
# E-step, labels, tissue weights
# ---------------------------------------------------------------------------


class TestEStep:
    def test_fully_missing_voxel_takes_prior(self):
        bundle = _bundle_2d()
        prior = np.array([[0.3, 0.7], [0.5, 0.5]])
        values = np.array([[0.0, 0.0], [4.0, 5.0]])
        observed = np.array([[False, False], [True, True]])
        result = e_step(values, observed, np.ones_like(values), prior, bundle)
        np.testing.assert_allclose(result.gamma[0], [0.3, 0.7])
        np.testing.assert_allclose(result.gamma.sum(axis=1), 1.0)

    def test_bias_must_be_positive(self):
        bundle = _bundle_2d()
        values = np.ones((1, 2))
        with pytest.raises(InvalidInputError, match="bias"):
            e_step(values, np.ones((1, 2), dtype=bool), np.zeros((1, 2)), np.full((1, 2), 0.5), bundle)

    def test_certain_labels_pin_responsibilities(self):
        bundle = _bundle_2d()
        values = np.array([[1.0, 1.0], [9.0, 9.0], [5.0, 5.0]])
        labels = LabelData(np.array([2, 1, 0]), zeta=1.0)
        result = e_step(values, np.ones_like(values, dtype=bool), np.ones_like(values),
                        np.full((3, 2), 0.5), bundle, labels)
        np.testing.assert_allclose(result.gamma[0], [0.0, 1.0])
        np.testing.assert_allclose(result.gamma[1], [1.0, 0.0])

    def test_zeta_below_chance_is_rejected(self):
        labels = LabelData(np.array([1, 2]), zeta=0.45)
        with pytest.raises(InvalidInputError, match="zeta"):
            labels.validate(2)

    def test_zeta_at_chance_carries_no_information(self):
        bundle = _bundle_2d(K=3)
        rng = np.random.default_rng(3)
        values = rng.uniform(0, 10, size=(4, 2))
        observed = np.ones_like(values, dtype=bool)
        prior = rng.dirichlet(np.ones(3), size=4)
        labels = LabelData(np.array([1, 2, 3, 0]), zeta=1.0 / 3.0)
        labelled = e_step(values, observed, np.ones_like(values), prior, bundle, labels).gamma
        unlabeled = e_step(values, observed, np.ones_like(values), prior, bundle).gamma
        np.testing.assert_allclose(labelled, unlabeled, atol=1e-12)

    def test_label_map_spreads_zeta(self):
        labels = LabelData(np.array([1]), zeta=0.9, class_sets={1: [0, 1]})
        row = np.exp(labels.log_likelihood(3)[0])
        np.testing.assert_allclose(row, [0.45, 0.45, 0.1])

    def test_unmapped_label(self):
        labels = LabelData(np.array([4]), zeta=0.9)
        with pytest.raises(InvalidInputError, match="no class mapping"):
            labels.log_likelihood(3)

    def test_warped_prior_uniform_weights(self):
        pi = np.array([[0.2, 0.8], [0.0, 1.0]])
        out = warped_prior(pi, np.ones(2), eps=1e-6)
        np.testing.assert_allclose(out[0], [0.2, 0.8])
        assert out[1, 0] > 0

    def test_tissue_weights_do_not_lower_objective(self):
        rng = np.random.default_rng(4)
        pi = rng.dirichlet(np.ones(3), size=50)
        gamma = rng.dirichlet(np.ones(3) * 0.5, size=50)
        before = tissue_weight_objective(gamma, pi, np.ones(3))
        w = update_tissue_weights(gamma, pi, np.ones(3))
        assert w.sum() == pytest.approx(3.0)
        assert tissue_weight_objective(gamma, pi, w) >= before - 1e-10

    def test_tissue_weights_match_line_search(self):
        pi = np.array([[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]])
        gamma = np.array([[0.9, 0.1], [0.6, 0.4], [0.5, 0.5]])
        w = update_tissue_weights(gamma, pi, np.ones(2), rtol=1e-12, max_iter=5000)
        # weights sum to K, so one scalar spans the feasible set
        search = optimize.minimize_scalar(
            lambda s: -tissue_weight_objective(gamma, pi, np.array([s, 2.0 - s])),
            bounds=(1e-3, 2.0 - 1e-3), method="bounded", options={"xatol": 1e-10},
        )
        np.testing.assert_allclose(w, [search.x, 2.0 - search.x], atol=1e-4)


# ---------------------------------------------------------------------------
# Standalone VBEM
# ---------------------------------------------------------------------------


class TestFitMixture:
    def test_bound_is_nondecreasing(self):
        values, observed = _two_clusters()
        prior = np.full((values.shape[0], 2), 0.5)
        hyper = default_prior(values, observed, classes=2)
        fit = fit_mixture(values, observed, prior, hyper, iterations=15)
        diffs = np.diff(fit.bounds)
        assert np.all(diffs >= -1e-8 * np.abs(np.asarray(fit.bounds[1:])))

    def test_recovers_cluster_means(self):
        values, observed = _two_clusters()
        prior = np.full((values.shape[0], 2), 0.5)
        hyper = default_prior(values, observed, classes=2)
        fit = fit_mixture(values, observed, prior, hyper, iterations=30)
        np.testing.assert_allclose(np.sort(fit.posterior.m[:, 0]), [0.0, 10.0], atol=0.5)

    def test_complete_data_matches_textbook_vbem(self):
        rng = np.random.default_rng(6)
        values = np.concatenate([rng.normal([2.0, 3.0], 1.0, (30, 2)), rng.normal([8.0, 7.0], 1.0, (30, 2))])
        observed = np.ones_like(values, dtype=bool)
        prior = rng.dirichlet(np.ones(2), size=values.shape[0])
        hyper = _bundle_2d(K=2, seed=7)
        fit = fit_mixture(values, observed, prior, hyper, iterations=10)

        m, beta, W, nu = hyper.m.copy(), hyper.beta.copy(), hyper.W.copy(), hyper.nu.copy()
        D = 2
        for _ in range(10):
            log_rho = np.log(prior)
            for k in range(2):
                e_logdet = (special.digamma(0.5 * (nu[k] - np.arange(D))).sum() + D * np.log(2.0)
                            + np.linalg.slogdet(W[k])[1])
                diff = values - m[k]
                quad = np.einsum("ni,ij,nj->n", diff, W[k], diff)
                log_rho[:, k] += 0.5 * e_logdet - 0.5 * D / beta[k] - 0.5 * nu[k] * quad
            gamma = np.exp(log_rho - special.logsumexp(log_rho, axis=1, keepdims=True))
            for k in range(2):
                Nk = gamma[:, k].sum()
                xbar = gamma[:, k] @ values / Nk
                centred = values - xbar
                S = np.einsum("n,ni,nj->ij", gamma[:, k], centred, centred) / Nk
                shift = xbar - hyper.m[k]
                W_inv = (np.linalg.inv(hyper.W[k]) + Nk * S
                         + hyper.beta[k] * Nk / (hyper.beta[k] + Nk) * np.outer(shift, shift))
                beta[k] = hyper.beta[k] + Nk
                m[k] = (hyper.beta[k] * hyper.m[k] + Nk * xbar) / beta[k]
                nu[k] = hyper.nu[k] + Nk
                W[k] = np.linalg.inv(W_inv)

        np.testing.assert_allclose(fit.gamma, gamma, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(fit.posterior.m, m, rtol=1e-10)
        np.testing.assert_allclose(fit.posterior.beta, beta, rtol=1e-10)
        np.testing.assert_allclose(fit.posterior.nu, nu, rtol=1e-10)
        np.testing.assert_allclose(fit.posterior.W, W, rtol=1e-10, atol=1e-14)

    def test_bound_terms_are_named(self):
        values, observed = _two_clusters(n=20)
        prior = np.full((values.shape[0], 2), 0.5)
        hyper = default_prior(values, observed, classes=2)
        estep = e_step(values, observed, np.ones_like(values), prior, hyper)
        terms = mixture_bound(values, observed, np.ones_like(values), prior, estep, hyper, hyper)
        assert set(terms) == {"likelihood", "prior_z", "labels", "entropy_z", "gw_prior", "gw_entropy"}
        # posterior equal to the prior: KL vanishes
        assert terms["gw_prior"] + terms["gw_entropy"] == pytest.approx(0.0, abs=1e-9)
