from .gauss_wishart import (
    GaussWishartBundle,
    SufficientStats,
    default_prior,
    ensure_pd,
    fit_intensity_hyperpriors,
    m_step,
)
from .responsibilities import (
    EPS_PI,
    EStepResult,
    LabelData,
    MissingPosterior,
    MixtureFit,
    e_step,
    expected_log_likelihood,
    fit_mixture,
    infer_missing,
    mixture_bound,
    sufficient_stats,
    tissue_weight_objective,
    update_tissue_weights,
    warped_prior,
)

__all__ = [
    "GaussWishartBundle",
    "SufficientStats",
    "default_prior",
    "ensure_pd",
    "fit_intensity_hyperpriors",
    "m_step",
    "EPS_PI",
    "EStepResult",
    "LabelData",
    "MissingPosterior",
    "MixtureFit",
    "e_step",
    "expected_log_likelihood",
    "fit_mixture",
    "infer_missing",
    "mixture_bound",
    "sufficient_stats",
    "tissue_weight_objective",
    "update_tissue_weights",
    "warped_prior",
]
