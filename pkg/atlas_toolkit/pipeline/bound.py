"""Variational lower bound of the whole model with a per-term, per-subject breakdown."""

from dataclasses import dataclass, field

import numpy as np

from ..core.errors import NumericalError
from ..mixture.gauss_wishart import GaussWishartBundle
from ..mixture.responsibilities import EPS_PI, EStepResult, expected_log_likelihood, mixture_bound
from ..registration.matching import WarpedPrior, warp_prior
from ..template import TissueAtlas, dirichlet_log_prior
from .state import SubjectState

SUBJECT_TERMS = (
    "likelihood",
    "prior_z",
    "labels",
    "entropy_z",
    "gw_prior",
    "gw_entropy",
    "bias_prior",
    "affine_prior",
    "velocity_prior",
)


@dataclass
class LowerBound:
    total: float
    terms: dict = field(default_factory=dict)
    per_subject: list = field(default_factory=list)

    def subject_total(self, index: int) -> float:
        return float(sum(self.per_subject[index].values()))


def subject_prior(state: SubjectState, atlas: TissueAtlas, eps: float = EPS_PI) -> WarpedPrior:
    return warp_prior(atlas.pi, atlas.grid, state.template_points(), state.weights, eps)


def subject_bound_terms(state: SubjectState, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                        eps: float = EPS_PI) -> dict[str, float]:
    """Every bound term that belongs to one subject, evaluated at its current parameters."""
    volume = state.data.volume
    values = volume.flat_values()
    observed = volume.flat_observed()
    bias = state.bias_field()
    prior = subject_prior(state, atlas, eps).prior

    corrected = np.where(observed, values * bias, 0.0)
    log_lik = expected_log_likelihood(corrected, observed, state.posterior)
    labels = state.data.labels
    log_labels = labels.log_likelihood(atlas.K) if labels is not None else np.zeros_like(log_lik)
    try:
        terms = mixture_bound(
            values, observed, bias, prior, EStepResult(state.gamma, log_lik, log_labels), state.posterior, hyperprior
        )
    except NumericalError as e:
        raise NumericalError("non-finite bound term", term=e.term, subject=state.name) from e
    terms["bias_prior"] = state.bias.log_prior()
    terms["affine_prior"] = state.affine.log_prior()
    terms["velocity_prior"] = state.velocity.log_prior()
    for name in ("bias_prior", "affine_prior", "velocity_prior"):
        if not np.isfinite(terms[name]):
            raise NumericalError("non-finite bound term", term=name, subject=state.name)
    return terms


def compute_lower_bound(states: list[SubjectState], atlas: TissueAtlas, hyperprior: GaussWishartBundle,
                        eps: float = EPS_PI) -> LowerBound:
    """Sum of all subject terms plus the Dirichlet log-prior of the template."""
    per_subject = [subject_bound_terms(s, atlas, hyperprior, eps) for s in states]
    terms = {name: float(sum(t[name] for t in per_subject)) for name in SUBJECT_TERMS}
    terms["dirichlet"] = dirichlet_log_prior(atlas.pi, atlas.alpha0)
    if not np.isfinite(terms["dirichlet"]):
        raise NumericalError("non-finite bound term", term="dirichlet")
    return LowerBound(float(sum(terms.values())), terms, per_subject)
