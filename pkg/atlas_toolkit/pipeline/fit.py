"""Groupwise coordinate ascent and segmentation of unseen volumes against a frozen atlas."""

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..bias import BiasModel, gauss_newton_bias_update
from ..core.config import ModelConfig
from ..core.errors import AtlasToolkitError, InvalidInputError, NumericalError
from ..geometry.grid import DeformationField, GridSpec, VolumeGrid
from ..mixture.gauss_wishart import GaussWishartBundle, default_prior, fit_intensity_hyperpriors, m_step
from ..mixture.responsibilities import LabelData, e_step, sufficient_stats, update_tissue_weights
from ..registration.affine import AffineParams, gauss_newton_affine_update
from ..registration.operator import OperatorSpec
from ..registration.velocity import VelocityParams, gauss_newton_velocity_update
from ..template import (
    PushedStats,
    TissueAtlas,
    push_responsibilities,
    smooth_template,
    update_template_unit_weights,
    update_template_weighted,
)
from .bound import LowerBound, compute_lower_bound, subject_bound_terms, subject_prior
from .ledger import BoundLedger, LedgerEntry
from .state import SubjectData, SubjectState, intensity_centroid

logger = logging.getLogger("atlas-toolkit")

# relative slack for rounding when comparing recomputed bounds
BOUND_RTOL = 1e-10


@dataclass
class GroupwiseFit:
    atlas: TissueAtlas
    states: list[SubjectState]
    hyperprior: GaussWishartBundle
    ledger: BoundLedger
    bound: LowerBound
    stats: Optional[PushedStats] = None


@dataclass
class Segmentation:
    gamma: np.ndarray               # (nx, ny, nz, K)
    bias: np.ndarray                # (nx, ny, nz, D)
    deformation: DeformationField
    state: SubjectState
    bounds: list = field(default_factory=list)


def template_grid(volumes: list[VolumeGrid]) -> GridSpec:
    """Median spacing; dims large enough to hold every subject's field of view."""
    spacing = np.median(np.array([v.spacing for v in volumes]), axis=0)
    extent = np.max(np.array([np.asarray(v.dims) * np.asarray(v.spacing) for v in volumes]), axis=0)
    dims = np.maximum(np.ceil(extent / spacing - 1e-9).astype(int), 1)
    return GridSpec(tuple(int(n) for n in dims), tuple(float(s) for s in spacing))


def initial_hyperprior(subjects: list[SubjectData], config: ModelConfig) -> GaussWishartBundle:
    values = np.concatenate([s.volume.flat_values() for s in subjects])
    observed = np.concatenate([s.volume.flat_observed() for s in subjects])
    return default_prior(values, observed, config.classes, config.prior_beta, config.prior_nu_offset)


def _velocity_enabled(config: ModelConfig, grid: GridSpec) -> bool:
    return config.register_velocity and min(grid.dims) >= 4


def initialise_subject(data: SubjectData, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                       config: ModelConfig, translation=None) -> SubjectState:
    """Zero bias, a = 0 with the given translation, zero velocity, gamma = warped prior."""
    grid = data.grid
    K = config.classes
    if data.volume.channels != hyperprior.D:
        raise InvalidInputError(
            f"{data.name}: {data.volume.channels} channels but the intensity prior has {hyperprior.D}"
        )
    if data.labels is not None:
        if not data.labels.class_sets:
            labels = dataclasses.replace(data.labels, class_sets=config.class_sets())
            data = dataclasses.replace(data, labels=labels)
        data.labels.validate(K)
        if data.labels.labels.size != grid.n_voxels:
            raise InvalidInputError(f"{data.name}: label volume does not match the image grid")
    bias = BiasModel.for_grid(
        grid.dims, grid.spacing, data.volume.channels, config.bias_period_mm,
        config.bias_reg, config.bias_dc_precision, config.bias_orders or None,
    )
    state = SubjectState(
        data=data,
        weights=np.ones(K),
        bias=bias,
        affine=AffineParams.from_config(config, t=translation),
        velocity=VelocityParams.zeros(grid.dims, OperatorSpec.from_config(config, grid.spacing)),
        posterior=hyperprior.copy(),
        gamma=np.zeros((grid.n_voxels, K)),
        deformation=DeformationField.identity(grid.dims),
        damping={family: config.levenberg_init for family in ("bias", "affine", "velocity")},
    )
    state.gamma = subject_prior(state, atlas, config.eps_pi).prior
    return state


class _SubjectSweep:
    """Runs the per-subject families in order and records one ledger entry per update."""

    def __init__(self, state: SubjectState, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                 config: ModelConfig, iteration: int, offset: float, ledger: Optional[BoundLedger] = None):
        self.state = state
        self.atlas = atlas
        self.hyperprior = hyperprior
        self.config = config
        self.iteration = iteration
        self.offset = offset
        self.ledger = ledger
        self.entries: list[LedgerEntry] = []
        self.current = self._value(state)

    def _value(self, state: SubjectState) -> float:
        return float(sum(subject_bound_terms(state, self.atlas, self.hyperprior, self.config.eps_pi).values()))

    def _commit(self, family: str, trial: Optional[SubjectState], flags: list, started: float) -> None:
        """Adopt trial if the recomputed bound did not drop, and record the outcome."""
        before = self.current
        accepted = False
        after = before
        if trial is not None:
            value = self._value(trial)
            if value >= before - BOUND_RTOL * abs(before):
                accepted, after = True, value
            else:
                flags = flags + ["bound-mismatch"]
                logger.debug("%s %s: recomputed bound dropped by %.3g", self.state.name, family, before - value)
        if accepted:
            self._adopt(trial)
            self.current = after
        ms = (time.perf_counter() - started) * 1000.0
        self.entries.append(
            LedgerEntry(self.iteration, family, self.state.name, self.offset + before, self.offset + after,
                        accepted, list(flags), ms)
        )

    def _adopt(self, trial: SubjectState) -> None:
        s = self.state
        s.weights, s.bias, s.affine, s.velocity = trial.weights, trial.bias, trial.affine, trial.velocity
        s.posterior, s.gamma, s.deformation, s.damping = trial.posterior, trial.gamma, trial.deformation, trial.damping

    def _phase(self, name: str):
        if self.ledger is None:
            return nullcontext()
        return self.ledger.phase(name)

    def run(self) -> list[LedgerEntry]:
        cfg = self.config
        for _ in range(max(cfg.mixture_iterations, 1)):
            with self._phase("mixture"):
                self.mixture()
        if cfg.update_weights:
            with self._phase("weights"):
                self.weights()
        for _ in range(max(cfg.gn_steps, 1)):
            if cfg.update_bias:
                with self._phase("bias"):
                    self.bias()
            if cfg.register_affine:
                with self._phase("affine"):
                    self.affine()
            if _velocity_enabled(cfg, self.state.grid):
                with self._phase("velocity"):
                    self.velocity()
        return self.entries

    def mixture(self) -> None:
        started = time.perf_counter()
        s = self.state
        volume = s.data.volume
        values, observed = volume.flat_values(), volume.flat_observed()
        bias = s.bias_field()
        prior = subject_prior(s, self.atlas, self.config.eps_pi).prior
        estep = e_step(values, observed, bias, prior, s.posterior, s.data.labels)
        corrected = np.where(observed, values * bias, 0.0)
        stats = sufficient_stats(corrected, observed, estep.gamma, s.posterior)
        posterior, flags = m_step(stats, self.hyperprior)
        if estep.degenerate:
            flags = flags + [f"degenerate:{estep.degenerate}"]
        trial = s.copy()
        trial.gamma, trial.posterior = estep.gamma, posterior
        self._commit("mixture", trial, flags, started)

    def weights(self) -> None:
        started = time.perf_counter()
        s = self.state
        warped = subject_prior(s, self.atlas, self.config.eps_pi)
        weights = update_tissue_weights(s.gamma, warped.pi, s.weights, self.config.eps_pi)
        if np.array_equal(weights, s.weights):
            self._commit("weights", None, ["unchanged"], started)
            return
        trial = s.copy()
        trial.weights = weights
        self._commit("weights", trial, [], started)

    def bias(self) -> None:
        started = time.perf_counter()
        s = self.state
        volume = s.data.volume
        update = gauss_newton_bias_update(
            volume.flat_values(), volume.flat_observed(), s.gamma, s.posterior, s.bias, s.grid.dims,
            damping=s.damping["bias"], max_backtracks=self.config.max_backtracks,
        )
        s.damping["bias"] = update.damping
        if not update.accepted:
            self._commit("bias", None, update.flags, started)
            return
        trial = s.copy()
        trial.bias = update.model
        self._commit("bias", trial, update.flags, started)

    def affine(self) -> None:
        started = time.perf_counter()
        s = self.state
        update = gauss_newton_affine_update(
            s.gamma, self.atlas, s.weights, s.deformation.forward, s.grid, s.affine,
            self.config.eps_pi, s.damping["affine"], self.config.max_backtracks,
        )
        s.damping["affine"] = update.damping
        if not update.accepted:
            self._commit("affine", None, update.flags, started)
            return
        trial = s.copy()
        trial.affine = update.params
        self._commit("affine", trial, update.flags, started)

    def velocity(self) -> None:
        started = time.perf_counter()
        s = self.state
        cfg = self.config
        update = gauss_newton_velocity_update(
            s.gamma, self.atlas, s.weights, s.affine, s.velocity, s.grid,
            steps=cfg.shoot_steps, eps=cfg.eps_pi, damping=s.damping["velocity"],
            max_backtracks=cfg.max_backtracks, tol=cfg.multigrid_tol, max_cycles=cfg.multigrid_max_cycles,
            deformation=s.deformation,
        )
        s.damping["velocity"] = update.damping
        if not update.accepted:
            self._commit("velocity", None, update.flags, started)
            return
        trial = s.copy()
        trial.velocity, trial.deformation = update.params, update.deformation
        self._commit("velocity", trial, update.flags, started)


def subject_sweep(state: SubjectState, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                  config: ModelConfig, iteration: int = 0, offset: float = 0.0,
                  ledger: Optional[BoundLedger] = None) -> list[LedgerEntry]:
    """One pass of mixture, weights, bias, affine and velocity updates for one subject.

    Ledger values are offset + this subject's running bound, so with offset
    set to the sweep-start total minus the subject's share they report the
    global bound.
    """
    try:
        return _SubjectSweep(state, atlas, hyperprior, config, iteration, offset, ledger).run()
    except NumericalError:
        raise
    except AtlasToolkitError as e:
        raise NumericalError(str(e), term="subject-sweep", subject=state.name) from e


def _push_all(states: list[SubjectState], atlas: TissueAtlas) -> PushedStats:
    stats = PushedStats.zeros(atlas.grid.n_voxels, atlas.K)
    for s in states:
        stats = stats.merge(
            push_responsibilities(s.gamma, s.grid, s.deformation, s.affine.matrix, s.affine.t, s.weights, atlas)
        )
    return stats


def _template_step(states, atlas, hyperprior, config, iteration, bound, ledger):
    started = time.perf_counter()
    with ledger.phase("template"):
        stats = _push_all(states, atlas)
        unit = all(np.all(s.weights == 1.0) for s in states)
        if unit:
            update = update_template_unit_weights(stats, atlas.alpha0)
        else:
            update = update_template_weighted(stats, atlas.alpha0, atlas.flat())
        flags = []
        if update.fallbacks:
            flags.append(f"uniform-rows:{update.fallbacks}")
        if update.retained:
            flags.append(f"retained-rows:{update.retained}")
        target = smooth_template(update.pi.reshape(atlas.pi.shape), config.template_fwhm, atlas.spacing, config.eps_pi)

        accepted = False
        new_atlas, new_bound = atlas, bound
        factor = 1.0
        for attempt in range(config.max_backtracks + 1):
            candidate = atlas.with_pi((1.0 - factor) * atlas.pi + factor * target)
            value = compute_lower_bound(states, candidate, hyperprior, config.eps_pi)
            if value.total >= bound.total:
                accepted, new_atlas, new_bound = True, candidate, value
                if attempt:
                    flags.append(f"backtracked:{attempt}")
                break
            factor *= 0.5
        if not accepted:
            flags.append("rejected")
            logger.warning("Sweep %d: template update lowered the bound; kept previous template", iteration)
    ledger.record(iteration, "template", "*", bound.total, new_bound.total, accepted, flags,
                  (time.perf_counter() - started) * 1000.0)
    return new_atlas, new_bound, stats


def _hyperprior_step(states, atlas, hyperprior, config, iteration, bound, ledger):
    started = time.perf_counter()
    with ledger.phase("hyperprior"):
        candidate = fit_intensity_hyperpriors([s.posterior for s in states])
        value = compute_lower_bound(states, atlas, candidate, config.eps_pi)
    accepted = value.total >= bound.total
    ledger.record(iteration, "hyperprior", "*", bound.total, value.total if accepted else bound.total,
                  accepted, [] if accepted else ["rejected"], (time.perf_counter() - started) * 1000.0)
    if accepted:
        return candidate, value
    return hyperprior, bound


def _flush_partial(checkpoint_dir: Optional[Path], ledger: BoundLedger, atlas: TissueAtlas,
                   hyperprior: GaussWishartBundle) -> None:
    if checkpoint_dir is None:
        return
    from .outputs import save_atlas

    try:
        ledger.to_csv(Path(checkpoint_dir) / "ledger.partial.csv")
        save_atlas(Path(checkpoint_dir) / "partial", atlas, hyperprior)
        logger.info("Partial outputs written to %s", checkpoint_dir)
    except OSError as e:
        logger.warning("Could not write partial outputs: %s", e)


def fit_groupwise(subjects: list[SubjectData], config: ModelConfig, ledger: Optional[BoundLedger] = None,
                  atlas: Optional[TissueAtlas] = None, hyperprior: Optional[GaussWishartBundle] = None,
                  checkpoint_dir: Optional[Path] = None) -> GroupwiseFit:
    """Learn the template, intensity hyperpriors and every subject's parameters."""
    config.validate()
    if not subjects:
        raise InvalidInputError("fit_groupwise needs at least one subject")
    channels = {s.volume.channels for s in subjects}
    if len(channels) != 1:
        raise InvalidInputError(f"all subjects must have the same channel count, got {sorted(channels)}")
    K = config.classes
    ledger = ledger or BoundLedger()

    if atlas is None:
        atlas = TissueAtlas.uniform(template_grid([s.volume for s in subjects]), K, config.alpha0)
    elif atlas.K != K:
        raise InvalidInputError(f"initial template has {atlas.K} classes, config asks for {K}")
    hyperprior = hyperprior or initial_hyperprior(subjects, config)

    centroids = [intensity_centroid(s.volume) for s in subjects]
    centre = np.mean(centroids, axis=0)
    states = [initialise_subject(s, atlas, hyperprior, config, centre - c) for s, c in zip(subjects, centroids)]
    bound = compute_lower_bound(states, atlas, hyperprior, config.eps_pi)
    ledger.bounds.append(bound.total)
    logger.info("Fitting %d subjects, K=%d, template %s: initial bound %.6g", len(states), K, atlas.grid.dims, bound.total)

    stats = None
    try:
        for sweep in range(1, config.max_sweeps + 1):
            start = bound

            def run(i: int) -> list[LedgerEntry]:
                offset = start.total - start.subject_total(i)
                return subject_sweep(states[i], atlas, hyperprior, config, sweep, offset, ledger)

            if config.threads > 1 and len(states) > 1:
                with ThreadPoolExecutor(max_workers=config.threads) as pool:
                    results = list(pool.map(run, range(len(states))))
            else:
                results = [run(i) for i in range(len(states))]
            for entries in results:
                ledger.extend(entries)
            bound = compute_lower_bound(states, atlas, hyperprior, config.eps_pi)

            if config.update_template:
                atlas, bound, stats = _template_step(states, atlas, hyperprior, config, sweep, bound, ledger)
            if config.fit_hyperpriors and len(states) >= 2:
                hyperprior, bound = _hyperprior_step(states, atlas, hyperprior, config, sweep, bound, ledger)

            ledger.bounds.append(bound.total)
            gain = (bound.total - start.total) / max(abs(start.total), 1e-300)
            logger.info("Sweep %d: bound %.8g (relative gain %.3g)", sweep, bound.total, gain)
            if gain < config.tol:
                break
    except (AtlasToolkitError, np.linalg.LinAlgError):
        _flush_partial(checkpoint_dir, ledger, atlas, hyperprior)
        raise

    if ledger.violations():
        logger.warning("%d accepted updates decreased the bound", len(ledger.violations()))
    if stats is None:
        stats = _push_all(states, atlas)
    return GroupwiseFit(atlas, states, hyperprior, ledger, bound, stats)


def segment_unseen(volume: VolumeGrid, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                   config: ModelConfig, labels: Optional[LabelData] = None,
                   init: Optional[SubjectState] = None, name: str = "subject") -> Segmentation:
    """Per-subject updates against a frozen template and intensity prior."""
    if volume.channels != hyperprior.D:
        raise InvalidInputError(
            f"volume has {volume.channels} channels, the trained intensity prior has {hyperprior.D}; "
            "declare absent channels as missing instead"
        )
    if atlas.K != hyperprior.K:
        raise InvalidInputError(f"template has {atlas.K} classes, intensity prior has {hyperprior.K}")
    config = dataclasses.replace(config, classes=atlas.K)
    if init is not None:
        state = init.copy()
        state.data = SubjectData(name, volume, labels)
    else:
        data = SubjectData(name, volume, labels)
        translation = atlas.foreground_centroid() - intensity_centroid(volume)
        state = initialise_subject(data, atlas, hyperprior, config, translation)

    bounds = []
    for iteration in range(1, config.segment_iterations + 1):
        entries = subject_sweep(state, atlas, hyperprior, config, iteration)
        bounds.append(entries[-1].after if entries else float("nan"))
        if len(bounds) > 1 and bounds[-1] - bounds[-2] < config.tol * abs(bounds[-2]):
            break
    dims = state.grid.dims
    return Segmentation(
        gamma=state.gamma.reshape(tuple(dims) + (atlas.K,)),
        bias=state.bias_field().reshape(tuple(dims) + (volume.channels,)),
        deformation=state.deformation,
        state=state,
        bounds=bounds,
    )
