"""Variational E-step with missing channels, rater labels and tissue weights.

All per-voxel arrays are flat: data (N, D), observed mask (N, D), priors and
responsibilities (N, K).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from ..core.errors import InvalidInputError, NumericalError
from .gauss_wishart import LOG_2PI, GaussWishartBundle, SufficientStats, m_step

logger = logging.getLogger("atlas-toolkit")

EPS_PI = 1e-6
WEIGHT_FLOOR = 1e-6


@dataclass
class LabelData:
    """Manual labels (0 = unlabeled) with rater sensitivity zeta.

    class_sets maps a label value to the 0-based classes it may stand for.
    """

    labels: np.ndarray
    zeta: float
    class_sets: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if np.any(self.labels < 0):
            raise InvalidInputError("labels must be non-negative")

    def validate(self, classes: int) -> None:
        if not (1.0 / classes <= self.zeta <= 1.0):
            raise InvalidInputError(f"zeta must lie in [1/K, 1], got {self.zeta}")

    def log_likelihood(self, classes: int) -> np.ndarray:
        """log p(z = k | l) per voxel, (N, K); zero rows for unlabeled voxels."""
        out = np.zeros((self.labels.size, classes))
        sets = self.class_sets or {k + 1: [k] for k in range(classes)}
        for label in np.unique(self.labels):
            if label == 0:
                continue
            members = sets.get(int(label))
            if members is None:
                raise InvalidInputError(f"label {label} has no class mapping")
            row = np.empty(classes)
            inside = np.zeros(classes, dtype=bool)
            inside[members] = True
            if inside.all():
                row[:] = 1.0 / classes
            else:
                row[inside] = self.zeta / inside.sum()
                row[~inside] = (1.0 - self.zeta) / (~inside).sum()
            with np.errstate(divide="ignore"):
                out[self.labels == label] = np.log(row)
        return out


@dataclass
class MissingPosterior:
    """q(h | z = k) for voxels sharing one missing-channel pattern."""

    hidden: np.ndarray          # (D,) bool, True for missing channels
    n: np.ndarray               # (n_vox, K, H) conditional means
    P: np.ndarray               # (K, H, H) precisions
    weights: Optional[np.ndarray] = None  # (n_vox, K) responsibilities

    def imputed(self) -> np.ndarray:
        """Posterior mean of the missing channels, (n_vox, H)."""
        if self.weights is None:
            raise InvalidInputError("imputation needs responsibilities")
        return np.einsum("nk,nkh->nh", self.weights, self.n)


@dataclass
class EStepResult:
    gamma: np.ndarray           # (N, K)
    log_lik: np.ndarray         # (N, K) expected log-likelihood per class
    log_labels: np.ndarray      # (N, K) log p(z | l), zeros when unlabeled
    degenerate: int = 0


def missing_patterns(observed: np.ndarray):
    """Yield (observed pattern (D,), voxel indices) groups in a fixed order."""
    patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for p in range(patterns.shape[0]):
        yield patterns[p], np.flatnonzero(inverse == p)


def warped_prior(pi_at_voxels: np.ndarray, weights: np.ndarray, eps: float = EPS_PI) -> np.ndarray:
    """w_k pi_k / sum_c w_c pi_c with template values floored at eps."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise InvalidInputError(f"tissue weights must be positive, got {weights}")
    weighted = np.maximum(pi_at_voxels, eps) * weights[None, :]
    return weighted / weighted.sum(axis=1, keepdims=True)


def infer_missing(values: np.ndarray, observed: np.ndarray, bundle: GaussWishartBundle,
                  gamma: Optional[np.ndarray] = None) -> MissingPosterior:
    """Conditional Gaussians of the missing channels for one missing pattern.

    values: (n_vox, D) with observed entries filled; observed: (D,) pattern.
    n_jk = m_h + E[L_hh]^-1 E[L_ho] (m_o - o_j), P_k = E[L_hh].
    """
    observed = np.asarray(observed, dtype=bool)
    hidden = ~observed
    if not observed.any():
        raise InvalidInputError("infer_missing needs at least one observed channel")
    values = np.atleast_2d(values)
    o = values[:, observed]
    lam = bundle.expected_precision()
    n = np.zeros((values.shape[0], bundle.K, int(hidden.sum())))
    P = np.zeros((bundle.K, int(hidden.sum()), int(hidden.sum())))
    for k in range(bundle.K):
        lam_hh = lam[k][np.ix_(hidden, hidden)]
        lam_ho = lam[k][np.ix_(hidden, observed)]
        innovation = bundle.m[k, observed][None, :] - o
        n[:, k, :] = bundle.m[k, hidden][None, :] + np.linalg.solve(lam_hh, lam_ho @ innovation.T).T
        P[k] = lam_hh
    return MissingPosterior(hidden, n, P, gamma)


def expected_log_likelihood(values: np.ndarray, observed: np.ndarray,
                            bundle: GaussWishartBundle) -> np.ndarray:
    """E_q[log p(o_j | z_j = k)] with missing channels integrated out, (N, K).

    Fully missing voxels get 0 for every class.
    """
    N = values.shape[0]
    D = bundle.D
    out = np.zeros((N, bundle.K))
    e_logdet = bundle.expected_log_det()
    const = 0.5 * e_logdet - 0.5 * D * LOG_2PI - 0.5 * D / bundle.beta
    for pattern, idx in missing_patterns(observed):
        if not pattern.any():
            continue
        hidden = ~pattern
        o = values[np.ix_(idx, pattern)]
        for k in range(bundle.K):
            W = bundle.W[k]
            if hidden.any():
                W_oo = W[np.ix_(pattern, pattern)]
                W_oh = W[np.ix_(pattern, hidden)]
                W_hh = W[np.ix_(hidden, hidden)]
                schur = W_oo - W_oh @ np.linalg.solve(W_hh, W_oh.T)
                _, logdet_hh = np.linalg.slogdet(bundle.nu[k] * W_hh)
                extra = 0.5 * hidden.sum() * LOG_2PI - 0.5 * logdet_hh
            else:
                schur = W
                extra = 0.0
            diff = o - bundle.m[k, pattern][None, :]
            quad = np.einsum("ni,ij,nj->n", diff, schur, diff)
            out[idx, k] = const[k] - 0.5 * bundle.nu[k] * quad + extra
    return out


def e_step(values: np.ndarray, observed: np.ndarray, bias: np.ndarray, prior: np.ndarray,
           bundle: GaussWishartBundle, labels: Optional[LabelData] = None) -> EStepResult:
    """Responsibilities proportional to exp(E[log N]) x prior x p(z | l).

    values are raw intensities; bias multiplies them channel-wise.
    """
    if np.any(bias[observed] <= 0):
        raise InvalidInputError("bias field must be strictly positive")
    corrected = np.where(observed, values * bias, 0.0)
    log_lik = expected_log_likelihood(corrected, observed, bundle)
    K = bundle.K
    if labels is not None:
        labels.validate(K)
        log_labels = labels.log_likelihood(K)
    else:
        log_labels = np.zeros_like(log_lik)

    with np.errstate(divide="ignore"):
        log_rho = log_lik + np.log(prior) + log_labels
    norm = logsumexp(log_rho, axis=1, keepdims=True)
    bad = ~np.isfinite(norm[:, 0])
    with np.errstate(invalid="ignore"):
        gamma = np.exp(log_rho - norm)
    degenerate = int(bad.sum())
    if degenerate:
        gamma[bad] = 1.0 / K
        logger.warning("E-step: %d voxels had no class mass, set to uniform", degenerate)
    return EStepResult(gamma=gamma, log_lik=log_lik, log_labels=log_labels, degenerate=degenerate)


def sufficient_stats(values: np.ndarray, observed: np.ndarray, gamma: np.ndarray,
                     bundle: GaussWishartBundle) -> SufficientStats:
    """Moments with missing entries replaced by n_jk and (P_k)^-1 added to S2.

    values must already be bias corrected; fully missing voxels carry no evidence.
    """
    K, D = gamma.shape[1], values.shape[1]
    s0 = np.zeros(K)
    s1 = np.zeros((K, D))
    S2 = np.zeros((K, D, D))
    for pattern, idx in missing_patterns(observed):
        if not pattern.any():
            continue
        g = gamma[idx]
        if pattern.all():
            x = values[idx]
            s0 += g.sum(axis=0)
            s1 += g.T @ x
            S2 += np.einsum("nk,ni,nj->kij", g, x, x)
            continue
        posterior = infer_missing(values[idx], pattern, bundle, g)
        hidden = posterior.hidden
        for k in range(K):
            x = np.empty((idx.size, D))
            x[:, pattern] = values[np.ix_(idx, pattern)]
            x[:, hidden] = posterior.n[:, k, :]
            gk = g[:, k]
            s0[k] += gk.sum()
            s1[k] += gk @ x
            S2[k] += np.einsum("n,ni,nj->ij", gk, x, x)
            S2[k][np.ix_(hidden, hidden)] += gk.sum() * np.linalg.inv(posterior.P[k])
    return SufficientStats(s0, s1, S2)


def tissue_weight_objective(gamma: np.ndarray, pi_at_voxels: np.ndarray, weights: np.ndarray,
                            eps: float = EPS_PI) -> float:
    """sum_jk gamma_jk log(w_k pi_jk / sum_c w_c pi_jc)."""
    prior = warped_prior(pi_at_voxels, weights, eps)
    return float(np.sum(xlogy(gamma, prior)))


def update_tissue_weights(gamma: np.ndarray, pi_at_voxels: np.ndarray, weights: np.ndarray,
                          eps: float = EPS_PI, rtol: float = 1e-6, max_iter: int = 500) -> np.ndarray:
    """Fixed point w_k <- sum_j gamma_jk / sum_j (pi_jk / sum_c w_c pi_jc), normalized to sum K."""
    K = gamma.shape[1]
    pi = np.maximum(pi_at_voxels, eps)
    w = np.asarray(weights, dtype=np.float64).copy()
    w *= K / w.sum()
    before = tissue_weight_objective(gamma, pi, w, eps)
    mass = gamma.sum(axis=0)
    for _ in range(max_iter):
        denom = (pi / (pi @ w)[:, None]).sum(axis=0)
        w_new = np.maximum(mass / denom, WEIGHT_FLOOR)
        w_new *= K / w_new.sum()
        change = np.max(np.abs(w_new - w) / w)
        w = w_new
        if change < rtol:
            break
    after = tissue_weight_objective(gamma, pi, w, eps)
    if after < before - 1e-10 * abs(before):
        logger.warning("Tissue weight update lowered its objective (%.6g -> %.6g); kept previous", before, after)
        return np.asarray(weights, dtype=np.float64).copy()
    return w


@dataclass
class MixtureFit:
    posterior: GaussWishartBundle
    gamma: np.ndarray
    bounds: list[float]


def mixture_bound(values: np.ndarray, observed: np.ndarray, bias: np.ndarray, prior: np.ndarray,
                  estep: EStepResult, posterior: GaussWishartBundle,
                  hyperprior: GaussWishartBundle) -> dict[str, float]:
    """Mixture-dependent bound terms for fixed prior field and bias."""
    gamma = estep.gamma
    log_bias = np.where(observed, np.log(np.where(observed, bias, 1.0)), 0.0)
    with np.errstate(invalid="ignore"):
        label_term = np.where(gamma > 0, gamma * estep.log_labels, 0.0)
    terms = {
        "likelihood": float(np.sum(gamma * estep.log_lik) + log_bias.sum()),
        "prior_z": float(np.sum(xlogy(gamma, prior))),
        "labels": float(np.sum(label_term)),
        "entropy_z": float(-np.sum(xlogy(gamma, gamma))),
    }
    entropy = posterior.entropy()
    kl = posterior.kl_to(hyperprior)
    terms["gw_prior"] = float(np.sum(-entropy - kl))
    terms["gw_entropy"] = float(np.sum(entropy))
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError("non-finite mixture bound term", term=name)
    return terms


def fit_mixture(values: np.ndarray, observed: np.ndarray, prior: np.ndarray,
                hyperprior: GaussWishartBundle, iterations: int = 10,
                labels: Optional[LabelData] = None, bias: Optional[np.ndarray] = None) -> MixtureFit:
    """Standalone VBEM against a fixed prior field.

    Each iteration runs E then M; bounds[i] is the bound after iteration i's M-step
    with that iteration's responsibilities.
    """
    if bias is None:
        bias = np.ones_like(values)
    corrected = np.where(observed, values * bias, 0.0)
    posterior = hyperprior.copy()
    bounds: list[float] = []
    gamma = np.asarray(prior, dtype=np.float64).copy()
    for _ in range(iterations):
        estep = e_step(values, observed, bias, prior, posterior, labels)
        gamma = estep.gamma
        stats = sufficient_stats(corrected, observed, gamma, posterior)
        posterior, _ = m_step(stats, hyperprior)
        log_lik = expected_log_likelihood(corrected, observed, posterior)
        current = EStepResult(gamma, log_lik, estep.log_labels, estep.degenerate)
        terms = mixture_bound(values, observed, bias, prior, current, posterior, hyperprior)
        bounds.append(sum(terms.values()))
    return MixtureFit(posterior, gamma, bounds)
