"""Tests for the lower bound, the ledger, groupwise fitting and segmentation of unseen volumes."""

import dataclasses
import itertools
from unittest.mock import patch

import numpy as np
import pytest

from atlas_toolkit.core.config import load_config
from atlas_toolkit.core.errors import InvalidInputError, NumericalError
from atlas_toolkit.geometry.grid import GridSpec, VolumeGrid
from atlas_toolkit.mixture import GaussWishartBundle, LabelData, fit_mixture
from atlas_toolkit.pipeline import (
    BoundLedger,
    SubjectData,
    SynthSpec,
    compute_lower_bound,
    dice_score,
    fit_groupwise,
    hard_segmentation,
    pearson_correlation,
    per_class_dice,
    segment_unseen,
    synthesize_dataset,
)
from atlas_toolkit.pipeline.bound import subject_prior
from atlas_toolkit.pipeline.fit import initial_hyperprior, initialise_subject, template_grid
from atlas_toolkit.pipeline.state import intensity_centroid
from atlas_toolkit.template import TissueAtlas, dirichlet_log_prior

SMALL = SynthSpec(subjects=2, dims=(8, 8, 8), classes=2, warp_mm=0.5, translation_mm=0.5)


def _small_config(**overrides):
    values = {"classes": 2, "max_sweeps": 2, "shoot_steps": 2, "multigrid_max_cycles": 10,
              "segment_iterations": 2, "tol": 0.0}
    values.update(overrides)
    return load_config(overrides=values)


def _matched_dice(seg, truth, classes):
    """Per-class Dice under the class relabelling that scores best."""
    best = None
    for order in itertools.permutations(range(1, classes + 1)):
        relabelled = np.asarray(order)[seg - 1]
        scores = list(per_class_dice(relabelled, truth, classes=range(1, classes + 1)).values())
        if best is None or np.mean(scores) > np.mean(best):
            best = scores
    return best


def _mixture_only(**overrides):
    return _small_config(
        update_weights=False,
        update_bias=False,
        register_affine=False,
        register_velocity=False,
        update_template=False,
        fit_hyperpriors=False,
        **overrides,
    )


@pytest.fixture(scope="module")
def dataset():
    return synthesize_dataset(SMALL, seed=1)


@pytest.fixture(scope="module")
def fitted(dataset):
    return fit_groupwise(dataset.subjects, _small_config())


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


class TestLedger:
    def test_violations(self):
        ledger = BoundLedger()
        ledger.record(1, "bias", "a", -100.0, -99.0, True)
        ledger.record(1, "affine", "a", -99.0, -99.5, True)
        ledger.record(1, "velocity", "a", -99.0, -99.5, False, ["rejected"])
        assert [e.family for e in ledger.violations()] == ["affine"]
        assert ledger.counters == {"rejected": 1}

    def test_csv_without_timing(self, tmp_path):
        ledger = BoundLedger()
        ledger.record(2, "template", "*", -10.0, -9.5, True, ["backtracked:1"], ms=12.5)
        path = ledger.to_csv(tmp_path / "ledger.csv", timing=False)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "iteration,family,subject,before,after,accepted,flags,ms"
        assert lines[1] == "2,template,*,-10.0,-9.5,1,backtracked:1,0"

    def test_report_lists_families(self):
        ledger = BoundLedger()
        with ledger.phase("mixture"):
            ledger.record(1, "mixture", "a", -5.0, -4.0, True)
        ledger.bounds.extend([-5.0, -4.0])
        report = ledger.report()
        assert "mixture" in report
        assert "over 1 sweeps" in report
        assert ledger.to_dict()["updates"] == 1


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class TestMetrics:
    def test_dice(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 0, 1, 0], dtype=bool)
        assert dice_score(a, b) == pytest.approx(0.5)
        assert dice_score(np.zeros(3), np.zeros(3)) == 1.0

    def test_per_class_dice_skips_background(self):
        scores = per_class_dice(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 1]))
        assert scores == {1: pytest.approx(2.0 / 3.0), 2: pytest.approx(2.0 / 3.0)}

    def test_hard_segmentation_is_one_based(self):
        gamma = np.array([[0.7, 0.3], [0.1, 0.9]])
        np.testing.assert_array_equal(hard_segmentation(gamma), [1, 2])

    def test_pearson(self):
        x = np.linspace(0, 1, 20)
        assert pearson_correlation(x, 3 * x + 1) == pytest.approx(1.0)
        mask = x > 0.5
        assert pearson_correlation(x, -x, mask) == pytest.approx(-1.0)

    def test_pearson_rejects_constant(self):
        with pytest.raises(InvalidInputError, match="constant"):
            pearson_correlation(np.ones(5), np.arange(5.0))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            dice_score(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# Lower bound
# ---------------------------------------------------------------------------


class TestLowerBound:
    def test_terms_add_up(self, dataset):
        config = _small_config()
        atlas = TissueAtlas.uniform(template_grid([s.volume for s in dataset.subjects]), 2)
        hyper = initial_hyperprior(dataset.subjects, config)
        states = [initialise_subject(s, atlas, hyper, config) for s in dataset.subjects]
        bound = compute_lower_bound(states, atlas, hyper)
        assert bound.total == pytest.approx(sum(bound.terms.values()))
        assert bound.terms["dirichlet"] == pytest.approx(dirichlet_log_prior(atlas.pi, atlas.alpha0))
        assert bound.total == pytest.approx(
            sum(bound.subject_total(i) for i in range(len(states))) + bound.terms["dirichlet"]
        )

    def test_subject_terms_are_additive(self, dataset):
        config = _small_config()
        atlas = TissueAtlas.uniform(GridSpec(SMALL.dims), 2)
        hyper = initial_hyperprior(dataset.subjects, config)
        state = initialise_subject(dataset.subjects[0], atlas, hyper, config)
        single = compute_lower_bound([state], atlas, hyper)
        double = compute_lower_bound([state, state], atlas, hyper)
        assert double.total - single.total == pytest.approx(single.subject_total(0))

    def test_initial_responsibilities_are_the_prior(self, dataset):
        config = _small_config()
        atlas = dataset.atlas
        hyper = initial_hyperprior(dataset.subjects, config)
        state = initialise_subject(dataset.subjects[0], atlas, hyper, config)
        np.testing.assert_allclose(state.gamma, subject_prior(state, atlas).prior)


# ---------------------------------------------------------------------------
# Groupwise fit
# ---------------------------------------------------------------------------


class TestFitGroupwise:
    def test_bound_never_decreases(self, fitted):
        assert fitted.ledger.violations() == []
        bounds = np.asarray(fitted.ledger.bounds)
        assert len(bounds) >= 2
        assert np.all(np.diff(bounds) >= -1e-8 * np.abs(bounds[:-1]))

    def test_every_family_is_recorded(self, fitted):
        families = {e.family for e in fitted.ledger.entries}
        assert {"mixture", "weights", "bias", "affine", "velocity", "template", "hyperprior"} <= families

    def test_outputs_are_consistent(self, fitted):
        assert fitted.atlas.pi.shape == SMALL.dims + (2,)
        np.testing.assert_allclose(fitted.atlas.pi.sum(axis=3), 1.0)
        for state in fitted.states:
            np.testing.assert_allclose(state.gamma.sum(axis=1), 1.0)
            assert state.deformation.jac_det.min() > 0
        assert fitted.stats.N.shape == (fitted.atlas.grid.n_voxels, 2)
        assert fitted.bound.total == pytest.approx(fitted.ledger.bounds[-1])

    def test_deterministic(self, dataset, fitted, tmp_path):
        again = fit_groupwise(dataset.subjects, _small_config())
        a = fitted.ledger.to_csv(tmp_path / "a.csv", timing=False).read_bytes()
        b = again.ledger.to_csv(tmp_path / "b.csv", timing=False).read_bytes()
        assert a == b

    def test_threads_give_the_same_ledger(self, dataset, fitted, tmp_path):
        threaded = fit_groupwise(dataset.subjects, _small_config(threads=2))
        a = fitted.ledger.to_csv(tmp_path / "a.csv", timing=False).read_bytes()
        b = threaded.ledger.to_csv(tmp_path / "b.csv", timing=False).read_bytes()
        assert a == b

    def test_single_subject_reduces_to_mixture_fit(self, dataset):
        subject = dataset.subjects[0]
        config = _mixture_only(max_sweeps=5)
        fit = fit_groupwise([subject], config)

        grid = template_grid([subject.volume])
        atlas = TissueAtlas.uniform(grid, 2, config.alpha0)
        hyper = initial_hyperprior([subject], config)
        volume = subject.volume
        prior = np.full((volume.grid.n_voxels, 2), 0.5)
        reference = fit_mixture(volume.flat_values(), volume.flat_observed(), prior, hyper, iterations=5)
        offset = dirichlet_log_prior(atlas.pi, atlas.alpha0)
        pairs = list(zip(fit.ledger.bounds[1:], reference.bounds))
        assert pairs
        for ours, theirs in pairs:
            assert ours == pytest.approx(theirs + offset, rel=1e-10)

    def test_hyperprior_step_skipped_for_one_subject(self, dataset):
        fit = fit_groupwise(dataset.subjects[:1], _small_config(max_sweeps=1))
        assert "hyperprior" not in {e.family for e in fit.ledger.entries}

    def test_rejects_mixed_channel_counts(self, dataset):
        other = SubjectData("two", VolumeGrid(np.ones(SMALL.dims + (2,))))
        with pytest.raises(InvalidInputError, match="channel"):
            fit_groupwise([dataset.subjects[0], other], _small_config())

    def test_rejects_empty_population(self):
        with pytest.raises(InvalidInputError):
            fit_groupwise([], _small_config())

    def test_failure_flushes_partial_outputs(self, dataset, tmp_path):
        with patch("atlas_toolkit.pipeline.fit.subject_sweep", side_effect=NumericalError("boom", term="x")):
            with pytest.raises(NumericalError):
                fit_groupwise(dataset.subjects, _small_config(), checkpoint_dir=tmp_path)
        assert (tmp_path / "ledger.partial.csv").exists()
        assert (tmp_path / "partial" / "atlas.mvol").exists()

    def test_linear_algebra_failure_flushes_partial_outputs(self, dataset, tmp_path):
        with patch("atlas_toolkit.pipeline.fit.subject_sweep", side_effect=np.linalg.LinAlgError("singular")):
            with pytest.raises(np.linalg.LinAlgError):
                fit_groupwise(dataset.subjects, _small_config(), checkpoint_dir=tmp_path)
        assert (tmp_path / "ledger.partial.csv").exists()
        assert (tmp_path / "partial" / "atlas.mvol").exists()

    def test_initialise_leaves_caller_labels_alone(self, dataset):
        subject = dataset.subjects[0]
        labels = LabelData(np.ones(subject.grid.n_voxels, dtype=int), zeta=0.95)
        labelled = dataclasses.replace(subject, labels=labels)
        config = _small_config()
        atlas = TissueAtlas.uniform(template_grid([subject.volume]), 2, config.alpha0)
        state = initialise_subject(labelled, atlas, initial_hyperprior([labelled], config), config)
        assert labels.class_sets == {}
        assert labelled.labels is labels
        assert state.data.labels.class_sets == {1: [0], 2: [1]}

    def test_intensity_centroid_seeds_translation(self):
        values = np.zeros((7, 7, 7))
        values[5, 3, 3] = 10.0
        np.testing.assert_allclose(intensity_centroid(VolumeGrid(values)), [2.0, 0.0, 0.0])
        np.testing.assert_array_equal(intensity_centroid(VolumeGrid(np.zeros((4, 4, 4)))), 0.0)


# ---------------------------------------------------------------------------
# Segmentation of unseen volumes
# ---------------------------------------------------------------------------


class TestSegmentUnseen:
    def test_segments_against_trained_atlas(self, fitted, dataset):
        unseen = synthesize_dataset(dataclasses.replace(SMALL, subjects=1), seed=7, atlas=dataset.atlas)
        result = segment_unseen(unseen.subjects[0].volume, fitted.atlas, fitted.hyperprior, _small_config(),
                                name="new")
        assert result.gamma.shape == SMALL.dims + (2,)
        np.testing.assert_allclose(result.gamma.sum(axis=3), 1.0)
        assert result.bias.shape == SMALL.dims + (1,)
        assert np.all(result.bias > 0)
        assert result.state.name == "new"
        assert 1 <= len(result.bounds) <= 2

    def test_uninformative_intensities_return_the_prior(self, dataset):
        atlas = dataset.atlas
        hyper = GaussWishartBundle(np.array([[50.0], [50.0]]), [1.0, 1.0], np.full((2, 1, 1), 0.01), [3.0, 3.0])
        config = _mixture_only(segment_iterations=1)
        volume = VolumeGrid(np.full(SMALL.dims, 50.0))
        result = segment_unseen(volume, atlas, hyper, config)
        expected = subject_prior(result.state, atlas).prior
        np.testing.assert_allclose(result.gamma.reshape(-1, 2), expected, atol=1e-12)

    def test_channel_mismatch(self, fitted):
        volume = VolumeGrid(np.ones(SMALL.dims + (2,)))
        with pytest.raises(InvalidInputError, match="missing"):
            segment_unseen(volume, fitted.atlas, fitted.hyperprior, _small_config())

    def test_warm_start(self, fitted, dataset):
        state = fitted.states[0]
        result = segment_unseen(state.data.volume, fitted.atlas, fitted.hyperprior,
                                _small_config(segment_iterations=1), init=state, name="again")
        assert result.state.name == "again"
        # the fitted state is left untouched
        assert fitted.states[0].name == dataset.subjects[0].name


# ---------------------------------------------------------------------------
# Desk-scale runs (pytest -m slow)
# ---------------------------------------------------------------------------


@pytest.mark.slow
class TestDeskScale:
    def test_bound_is_monotone_over_ten_sweeps(self):
        data = synthesize_dataset(SynthSpec(subjects=3, dims=(16, 16, 16), classes=3, noise_percent=3.0), seed=0)
        fit = fit_groupwise(data.subjects, load_config(overrides={"classes": 3, "max_sweeps": 10, "tol": 0.0}))
        assert fit.ledger.violations() == []
        assert fit.ledger.bounds[-1] >= fit.ledger.bounds[0]

    def test_noise_free_rendering_is_segmented_exactly(self):
        spec = SynthSpec(subjects=1, dims=(16, 16, 16), classes=3)
        atlas = synthesize_dataset(spec, seed=0).atlas
        truth = np.argmax(atlas.pi, axis=3) + 1
        means = spec.base_means()
        volume = VolumeGrid(means[truth - 1])
        hyper = GaussWishartBundle(means, np.full(3, 1e3), np.full((3, 1, 1), 0.1), np.full(3, 10.0))
        result = segment_unseen(volume, atlas, hyper, load_config(overrides={"segment_iterations": 3}))
        scores = per_class_dice(hard_segmentation(result.gamma), truth)
        assert min(scores.values()) >= 0.99

    @staticmethod
    def _bias_correlation(preset, noise):
        spec = SynthSpec.from_preset(preset, noise, subjects=3, dims=(32, 32, 32))
        data = synthesize_dataset(spec, seed=0)
        fit = fit_groupwise(data.subjects, load_config(overrides={"classes": 3, "max_sweeps": 8}))
        truth = data.truth[0]
        estimated = fit.states[0].bias_field()[:, 0]
        mask = truth.labels.reshape(-1) > 1
        return pearson_correlation(1.0 / estimated, truth.bias[..., 0].reshape(-1), mask)

    def test_bias_recovery(self):
        mild = self._bias_correlation("bias20", 1)
        strong = self._bias_correlation("bias40", 7)
        assert mild >= 0.80
        assert strong >= 0.45
        assert strong < mild

    def test_atlas_recovery(self):
        data = synthesize_dataset(SynthSpec(subjects=5, dims=(16, 16, 16), classes=3), seed=2)
        fit = fit_groupwise(data.subjects, load_config(overrides={"classes": 3, "max_sweeps": 8}))
        recovered = hard_segmentation(fit.atlas.pi)
        truth = hard_segmentation(data.atlas.pi)
        scores = _matched_dice(recovered, truth, 3)
        assert min(scores) >= 0.85

    def test_labels_improve_held_out_segmentation(self):
        data = synthesize_dataset(SynthSpec(subjects=5, dims=(16, 16, 16), classes=3, noise_percent=7.0), seed=3)
        config = load_config(overrides={"classes": 3, "max_sweeps": 6, "zeta": 1.0})

        def held_out_dice(fit):
            scores = []
            for state, truth in zip(fit.states[2:], data.truth[2:]):
                seg = hard_segmentation(state.gamma).reshape(truth.labels.shape)
                scores.extend(_matched_dice(seg, truth.labels, 3))
            return float(np.mean(scores))

        unsupervised = fit_groupwise(data.subjects, config)
        labelled = [
            dataclasses.replace(s, labels=LabelData(t.labels.reshape(-1), zeta=1.0)) if i < 2 else s
            for i, (s, t) in enumerate(zip(data.subjects, data.truth))
        ]
        supervised = fit_groupwise(labelled, config)
        assert held_out_dice(supervised) > held_out_dice(unsupervised)
