"""Gaussian-Wishart conjugate algebra: moments, divergences, M-step, empirical Bayes."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import digamma, multigammaln

from ..core.errors import InvalidInputError, NumericalError

logger = logging.getLogger("atlas-toolkit")

# s0 below this is treated as no evidence at all
ZERO_MASS = 1e-12
JITTER_ATTEMPTS = 3
HYPERPRIOR_CAP = 1e6

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussWishartBundle:
    """Per-class (m, beta, W, nu) over Gaussian means and precisions."""

    m: np.ndarray
    beta: np.ndarray
    W: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.m = np.atleast_2d(np.asarray(self.m, dtype=np.float64))
        K, D = self.m.shape
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(K)
        self.nu = np.asarray(self.nu, dtype=np.float64).reshape(K)
        self.W = np.asarray(self.W, dtype=np.float64).reshape(K, D, D)
        if np.any(self.beta <= 0):
            raise InvalidInputError(f"beta must be positive, got {self.beta}")
        if np.any(self.nu <= D - 1):
            raise InvalidInputError(f"nu must exceed D-1={D - 1}, got {self.nu}")
        for k in range(K):
            try:
                linalg.cholesky(self.W[k], lower=True)
            except linalg.LinAlgError:
                raise InvalidInputError(f"W[{k}] is not positive-definite") from None

    @property
    def K(self) -> int:
        return int(self.m.shape[0])

    @property
    def D(self) -> int:
        return int(self.m.shape[1])

    def copy(self) -> "GaussWishartBundle":
        return GaussWishartBundle(self.m.copy(), self.beta.copy(), self.W.copy(), self.nu.copy())

    def expected_precision(self) -> np.ndarray:
        """E[Lambda_k] = nu_k W_k, shape (K, D, D)."""
        return self.nu[:, None, None] * self.W

    def log_det_W(self) -> np.ndarray:
        return np.array([2.0 * np.sum(np.log(np.diag(linalg.cholesky(w, lower=True)))) for w in self.W])

    def expected_log_det(self) -> np.ndarray:
        """E[log |Lambda_k|] = sum_i psi((nu+1-i)/2) + D log 2 + log |W|."""
        D = self.D
        i = np.arange(1, D + 1)
        psi_sum = digamma((self.nu[:, None] + 1.0 - i[None, :]) / 2.0).sum(axis=1)
        return psi_sum + D * np.log(2.0) + self.log_det_W()

    def entropy(self) -> np.ndarray:
        """Per-class entropy of q(mu, Lambda)."""
        D = self.D
        e_logdet = self.expected_log_det()
        log_b = (
            -0.5 * self.nu * self.log_det_W()
            - 0.5 * self.nu * D * np.log(2.0)
            - multigammaln(self.nu / 2.0, D)
        )
        h_wishart = -log_b - 0.5 * (self.nu - D - 1.0) * e_logdet + 0.5 * self.nu * D
        h_gauss = 0.5 * D * (1.0 + LOG_2PI) - 0.5 * D * np.log(self.beta) - 0.5 * e_logdet
        return h_wishart + h_gauss

    def kl_to(self, prior: "GaussWishartBundle") -> np.ndarray:
        """Per-class KL(self || prior)."""
        D = self.D
        kl = np.zeros(self.K)
        for k in range(self.K):
            W_q, W_p = self.W[k], prior.W[k]
            nu_q, nu_p = self.nu[k], prior.nu[k]
            Wp_inv_Wq = linalg.solve(W_p, W_q, assume_a="pos")
            _, logdet_ratio = np.linalg.slogdet(Wp_inv_Wq)
            psi_d = digamma(nu_q / 2.0 + (1.0 - np.arange(1, D + 1)) / 2.0).sum()
            kl_wishart = (
                0.5 * (nu_q - nu_p) * psi_d
                + 0.5 * nu_q * (np.trace(Wp_inv_Wq) - D)
                - 0.5 * nu_p * logdet_ratio
                + multigammaln(nu_p / 2.0, D)
                - multigammaln(nu_q / 2.0, D)
            )
            diff = self.m[k] - prior.m[k]
            b_q, b_p = self.beta[k], prior.beta[k]
            kl_gauss = 0.5 * (
                D * b_p / b_q - D + D * np.log(b_q / b_p) + b_p * nu_q * diff @ W_q @ diff
            )
            kl[k] = kl_wishart + kl_gauss
        return kl

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "beta": self.beta.tolist(),
            "W": self.W.tolist(),
            "nu": self.nu.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussWishartBundle":
        return cls(
            m=np.asarray(data["m"]),
            beta=np.asarray(data["beta"]),
            W=np.asarray(data["W"]),
            nu=np.asarray(data["nu"]),
        )


@dataclass
class SufficientStats:
    """Zeroth, first and second moments per class."""

    s0: np.ndarray
    s1: np.ndarray
    S2: np.ndarray
    flags: list = field(default_factory=list)


def ensure_pd(matrix: np.ndarray, what: str = "W") -> tuple[np.ndarray, int]:
    """Symmetrize and add diagonal jitter until Cholesky succeeds (at most 3 times)."""
    matrix = 0.5 * (matrix + matrix.T)
    jitter = 1e-8 * np.trace(matrix) / matrix.shape[0]
    for attempt in range(JITTER_ATTEMPTS + 1):
        try:
            linalg.cholesky(matrix, lower=True)
            return matrix, attempt
        except linalg.LinAlgError:
            if attempt == JITTER_ATTEMPTS:
                break
            matrix = matrix + abs(jitter) * np.eye(matrix.shape[0])
            jitter *= 10.0
    raise NumericalError(f"{what} not positive-definite after {JITTER_ATTEMPTS} jitter attempts", term="W")


def m_step(stats: SufficientStats, prior: GaussWishartBundle) -> tuple[GaussWishartBundle, list[str]]:
    """Conjugate update of every class; classes without evidence copy the prior."""
    post = prior.copy()
    flags: list[str] = []
    for k in range(prior.K):
        s0 = float(stats.s0[k])
        if s0 < ZERO_MASS:
            continue
        s1 = stats.s1[k]
        beta = prior.beta[k] + s0
        xbar = s1 / s0
        diff = xbar - prior.m[k]
        W_inv = (
            np.linalg.inv(prior.W[k])
            + stats.S2[k]
            - np.outer(s1, s1) / s0
            + (prior.beta[k] * s0 / beta) * np.outer(diff, diff)
        )
        W_inv, jitter = ensure_pd(W_inv, what=f"W^-1[{k}]")
        W, jitter_w = ensure_pd(np.linalg.inv(W_inv), what=f"W[{k}]")
        if jitter or jitter_w:
            flags.append(f"jitter:{k}")
            logger.warning("Class %d scale matrix needed %d jitter steps", k, jitter + jitter_w)
        post.m[k] = (prior.beta[k] * prior.m[k] + s1) / beta
        post.beta[k] = beta
        post.nu[k] = prior.nu[k] + s0
        post.W[k] = W
    return post, flags


def default_prior(values: np.ndarray, observed: np.ndarray, classes: int,
                  beta: float = 1e-2, nu_offset: float = 1.0) -> GaussWishartBundle:
    """Weak data-driven prior: means at intensity quantiles, precision from the spread.

    values / observed are (N, D); class k gets the ((k + 0.5) / K) quantile per channel.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    D = values.shape[1]
    m = np.zeros((classes, D))
    var = np.ones(D)
    for d in range(D):
        column = values[observed[:, d], d]
        if column.size == 0:
            continue
        m[:, d] = np.quantile(column, (np.arange(classes) + 0.5) / classes)
        spread = float(np.var(column))
        var[d] = spread if spread > 0 else 1.0
    nu = D - 1.0 + nu_offset
    # class sd ~ data sd / K
    precision = np.diag(classes ** 2 / var)
    W = np.repeat((precision / nu)[None], classes, axis=0)
    return GaussWishartBundle(m, np.full(classes, beta), W, np.full(classes, nu))


def fit_intensity_hyperpriors(bundles: list[GaussWishartBundle], cap: float = HYPERPRIOR_CAP) -> GaussWishartBundle:
    """Empirical-Bayes prior by moment matching across subject posteriors.

    m0 is the mean of subject means, W0 / nu0 reproduce the mean and the
    dispersion of the diagonal of E[Lambda], and beta0 makes the prior
    predictive variance of mu equal the across-subject variance of the means.
    """
    if len(bundles) < 2:
        raise InvalidInputError("fit_intensity_hyperpriors needs at least 2 subjects")
    K, D = bundles[0].K, bundles[0].D
    m0 = np.zeros((K, D))
    beta0 = np.zeros(K)
    W0 = np.zeros((K, D, D))
    nu0 = np.zeros(K)
    for k in range(K):
        means = np.stack([b.m[k] for b in bundles])
        precisions = np.stack([b.nu[k] * b.W[k] for b in bundles])
        m0[k] = means.mean(axis=0)
        lam_bar = 0.5 * (precisions.mean(axis=0) + precisions.mean(axis=0).T)

        diag = precisions[:, np.arange(D), np.arange(D)]
        diag_var = diag.var(axis=0, ddof=1)
        with np.errstate(divide="ignore"):
            nu_per_channel = np.where(diag_var > 0, 2.0 * diag.mean(axis=0) ** 2 / diag_var, cap)
        nu0[k] = float(np.clip(nu_per_channel.mean(), D + 2.0, cap))
        W0[k], _ = ensure_pd(lam_bar / nu0[k], what=f"W0[{k}]")

        mean_var = float(np.trace(np.atleast_2d(np.cov(means.T, ddof=1))))
        expected_cov = np.linalg.inv(lam_bar) * nu0[k] / (nu0[k] - D - 1.0)
        if mean_var <= np.finfo(float).tiny:
            beta0[k] = cap
        else:
            beta0[k] = float(np.clip(np.trace(expected_cov) / mean_var, 1.0 / cap, cap))
    logger.debug("Hyperpriors: beta0=%s nu0=%s", beta0, nu0)
    return GaussWishartBundle(m0, beta0, W0, nu0)
