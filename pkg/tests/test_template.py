"""Tests for the tissue template: pushing responsibilities, closed-form updates, smoothing."""

import numpy as np
import pytest

from atlas_toolkit.core.errors import InvalidInputError
from atlas_toolkit.geometry.grid import DeformationField, GridSpec, identity_map, invert_displacement
from atlas_toolkit.template import (
    PushedStats,
    TissueAtlas,
    dirichlet_log_prior,
    posterior_concentration,
    push_responsibilities,
    smooth_template,
    template_objective,
    update_template_unit_weights,
    update_template_weighted,
)

DIMS = (6, 5, 4)


def _random_gamma(seed=0, K=3):
    return np.random.default_rng(seed).dirichlet(np.ones(K), size=int(np.prod(DIMS)))


def _project_to_simplex(v):
    """Euclidean projection of each row onto the probability simplex."""
    u = -np.sort(-v, axis=1)
    cumulative = np.cumsum(u, axis=1) - 1.0
    index = np.arange(1, v.shape[1] + 1)
    rho = np.count_nonzero(u - cumulative / index > 0, axis=1)
    theta = cumulative[np.arange(v.shape[0]), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0)


# ---------------------------------------------------------------------------
# TissueAtlas
# ---------------------------------------------------------------------------


class TestTissueAtlas:
    def test_uniform(self):
        atlas = TissueAtlas.uniform(GridSpec(DIMS, (1.0, 2.0, 1.0)), 3)
        assert atlas.K == 3
        assert atlas.grid.spacing == (1.0, 2.0, 1.0)
        np.testing.assert_allclose(atlas.pi, 1.0 / 3.0)
        np.testing.assert_allclose(atlas.alpha0, 1.01)
        assert atlas.class_names == ["class1", "class2", "class3"]

    def test_rows_must_sum_to_one(self):
        with pytest.raises(InvalidInputError, match="sum to 1"):
            TissueAtlas(np.full(DIMS + (2,), 0.6))

    def test_alpha0_at_least_one(self):
        with pytest.raises(InvalidInputError, match="alpha0"):
            TissueAtlas(np.full(DIMS + (2,), 0.5), alpha0=[0.5, 2.0])

    def test_flat_template_centroid_is_origin(self):
        atlas = TissueAtlas.uniform(GridSpec(DIMS), 2)
        np.testing.assert_array_equal(atlas.foreground_centroid(), 0.0)

    def test_foreground_centroid(self):
        pi = np.zeros((7, 7, 7, 2))
        pi[..., 0] = 1.0
        pi[5, 3, 3] = [0.0, 1.0]
        atlas = TissueAtlas(pi)
        np.testing.assert_allclose(atlas.foreground_centroid(), [2.0, 0.0, 0.0])

    def test_with_pi_keeps_metadata(self):
        atlas = TissueAtlas.uniform(GridSpec(DIMS), 2, alpha0=2.0)
        other = atlas.with_pi(np.full((int(np.prod(DIMS)), 2), 0.5))
        assert other.pi.shape == DIMS + (2,)
        np.testing.assert_allclose(other.alpha0, 2.0)


# ---------------------------------------------------------------------------
# Pushing responsibilities
# ---------------------------------------------------------------------------


class TestPush:
    def test_identity_push_reproduces_gamma(self):
        grid = GridSpec(DIMS)
        gamma = _random_gamma()
        atlas = TissueAtlas.uniform(grid, 3)
        stats = push_responsibilities(gamma, grid, DeformationField.identity(DIMS), np.eye(3), np.zeros(3),
                                      np.ones(3), atlas)
        np.testing.assert_allclose(stats.N, gamma, atol=1e-10)
        np.testing.assert_allclose(stats.masses[0], 1.0, atol=1e-10)
        np.testing.assert_allclose(stats.Wsum, 1.0, atol=1e-10)

    def test_small_warp_conserves_class_mass(self):
        dims = (12, 12, 12)
        grid = GridSpec(dims)
        ident = identity_map(dims)
        bump = np.prod(np.sin(np.pi * ident / (np.asarray(dims) - 1.0)) ** 2, axis=-1)
        displacement = 0.8 * bump[..., None] * np.array([1.0, -0.5, 0.3])
        warp = DeformationField(ident + displacement, invert_displacement(displacement))
        g0 = 0.5 + 0.3 * np.sin(2 * np.pi * ident[..., 0] / 12) * np.cos(2 * np.pi * ident[..., 1] / 12)
        gamma = np.stack([g0, 1.0 - g0], axis=-1).reshape(-1, 2)
        stats = push_responsibilities(gamma, grid, warp, np.eye(3), np.zeros(3), np.ones(2),
                                      TissueAtlas.uniform(grid, 2))
        np.testing.assert_allclose(stats.N.sum(axis=0), gamma.sum(axis=0), rtol=1e-2)

    def test_zoom_scales_volume(self):
        grid = GridSpec(DIMS)
        gamma = _random_gamma(seed=1)
        atlas = TissueAtlas.uniform(grid, 3)
        # template mm = 0.5 subject mm: each template voxel sees 1/8 of a subject voxel
        stats = push_responsibilities(gamma, grid, DeformationField.identity(DIMS), 0.5 * np.eye(3),
                                      np.zeros(3), np.ones(3), atlas)
        centre = atlas.grid.voxel_points_mm()
        inside = np.all(np.abs(centre) <= 1.0, axis=1)
        np.testing.assert_allclose(stats.N[inside].sum(axis=1), 8.0, atol=1e-10)

    def test_outside_subject_is_empty(self):
        grid = GridSpec(DIMS)
        atlas = TissueAtlas.uniform(grid, 3)
        stats = push_responsibilities(_random_gamma(), grid, DeformationField.identity(DIMS), np.eye(3),
                                      np.array([20.0, 0.0, 0.0]), np.ones(3), atlas)
        np.testing.assert_array_equal(stats.N, 0.0)

    def test_rejects_folded_deformation(self):
        grid = GridSpec(DIMS)
        flipped = identity_map(DIMS) * [-1.0, 1.0, 1.0]
        with pytest.raises(InvalidInputError):
            push_responsibilities(_random_gamma(), grid, DeformationField(flipped, flipped), np.eye(3),
                                  np.zeros(3), np.ones(3), TissueAtlas.uniform(grid, 3))

    def test_merge_sums(self):
        a = PushedStats(np.ones((2, 2)), np.ones((2, 2)), [np.ones(2)], [np.ones(2)])
        merged = a.merge(a)
        np.testing.assert_array_equal(merged.N, 2.0)
        assert len(merged.masses) == 2


# ---------------------------------------------------------------------------
# Template updates
# ---------------------------------------------------------------------------


class TestTemplateUpdate:
    def test_unit_weights_closed_form(self):
        stats = PushedStats(np.array([[2.0, 0.0]]), np.zeros((1, 2)))
        update = update_template_unit_weights(stats, np.array([2.0, 2.0]))
        np.testing.assert_allclose(update.pi, [[0.75, 0.25]])

    def test_unit_weights_match_projected_gradient_ascent(self):
        rng = np.random.default_rng(5)
        N = rng.uniform(1.0, 3.0, size=(5, 3))
        alpha0 = np.full(3, 1.5)
        update = update_template_unit_weights(PushedStats(N, np.zeros_like(N)), alpha0)

        c = N + alpha0 - 1.0
        pi = np.full((5, 3), 1.0 / 3.0)
        for _ in range(20000):
            pi = _project_to_simplex(pi + 0.005 * c / pi)
        np.testing.assert_allclose(update.pi, pi, atol=1e-6)

    def test_empty_voxel_falls_back_to_uniform(self):
        stats = PushedStats(np.zeros((2, 2)), np.zeros((2, 2)))
        stats.N[1] = [1.0, 0.0]
        update = update_template_unit_weights(stats, np.ones(2))
        assert update.fallbacks == 1
        np.testing.assert_allclose(update.pi, [[0.5, 0.5], [1.0, 0.0]])

    def test_weighted_stationary_point(self):
        stats = PushedStats(
            N=np.array([[3.0, 1.0]]),
            Wsum=np.array([[16.0 / 3.0, 8.0 / 3.0]]),
            masses=[np.array([4.0])],
            weights=[np.array([2.0, 1.0])],
        )
        previous = np.array([[0.5, 0.5]])
        update = update_template_weighted(stats, np.ones(2), previous)
        np.testing.assert_allclose(update.pi, [[0.6, 0.4]])
        assert update.retained == 0
        assert template_objective(stats, update.pi, np.ones(2)) > template_objective(stats, previous, np.ones(2))

    def test_unit_weights_agree(self):
        grid = GridSpec(DIMS)
        atlas = TissueAtlas.uniform(grid, 3)
        stats = push_responsibilities(_random_gamma(seed=2), grid, DeformationField.identity(DIMS), np.eye(3),
                                      np.zeros(3), np.ones(3), atlas)
        alpha0 = np.full(3, 1.5)
        weighted = update_template_weighted(stats, alpha0, atlas.flat())
        unit = update_template_unit_weights(stats, alpha0)
        np.testing.assert_allclose(weighted.pi, unit.pi, atol=1e-12)

    def test_rejects_small_alpha(self):
        stats = PushedStats(np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(InvalidInputError):
            update_template_unit_weights(stats, np.array([0.5, 1.0]))
        with pytest.raises(InvalidInputError):
            update_template_weighted(stats, np.array([0.5, 1.0]), np.full((1, 2), 0.5))

    def test_dirichlet_log_prior(self):
        # Beta(2, 2) density at 0.5 is 1.5
        assert dirichlet_log_prior(np.array([[0.5, 0.5]]), np.array([2.0, 2.0])) == pytest.approx(np.log(1.5))
        assert dirichlet_log_prior(np.full((4, 2), 0.5), np.ones(2)) == pytest.approx(0.0)

    def test_posterior_concentration(self):
        stats = PushedStats(np.array([[1.0, 2.0]]), np.zeros((1, 2)))
        np.testing.assert_allclose(posterior_concentration(stats, np.array([1.5, 1.5])), [[2.5, 3.5]])


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------


class TestSmoothing:
    def test_zero_fwhm_only_floors(self):
        pi = np.zeros(DIMS + (2,))
        pi[..., 0] = 1.0
        out = smooth_template(pi, 0.0, eps=1e-3)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)
        assert out[..., 1].min() == pytest.approx(1e-3 / (1.0 + 1e-3))

    def test_smoothing_spreads_a_point(self):
        pi = np.zeros((9, 9, 9, 2))
        pi[..., 0] = 1.0
        pi[4, 4, 4] = [0.0, 1.0]
        out = smooth_template(pi, 3.0)
        assert out[4, 4, 4, 1] < 1.0
        assert out[5, 4, 4, 1] > 1e-3
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)

    def test_negative_fwhm(self):
        with pytest.raises(InvalidInputError):
            smooth_template(np.full(DIMS + (2,), 0.5), -1.0)
