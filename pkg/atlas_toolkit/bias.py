"""Multiplicative bias fields: b = exp(sum_m c_m B_m) over a separable DCT-II basis."""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.fft import idct

from .core.errors import InvalidInputError
from .mixture.gauss_wishart import GaussWishartBundle
from .mixture.responsibilities import expected_log_likelihood, missing_patterns

logger = logging.getLogger("atlas-toolkit")


@lru_cache(maxsize=32)
def dct_basis(n: int, order: int) -> np.ndarray:
    """(n, order) orthonormal DCT-II basis vectors as columns."""
    if order > n:
        raise InvalidInputError(f"basis order {order} exceeds grid length {n}")
    basis = idct(np.eye(n)[:, :order], type=2, norm="ortho", axis=0)
    basis.setflags(write=False)
    return basis


@lru_cache(maxsize=8)
def _design_matrix(dims: tuple, orders: tuple) -> np.ndarray:
    bx, by, bz = (dct_basis(n, o) for n, o in zip(dims, orders))
    design = np.einsum("xa,yb,zc->xyzabc", bx, by, bz).reshape(int(np.prod(dims)), -1)
    design.setflags(write=False)
    return design


def orders_for_grid(dims, spacing, period_mm: float = 60.0) -> tuple[int, int, int]:
    """Largest order per axis whose shortest basis period is still >= period_mm."""
    orders = []
    for n, h in zip(dims, spacing):
        count = int(np.floor(2.0 * n * h / period_mm)) + 1
        orders.append(max(1, min(int(n), count)))
    return tuple(orders)


def bending_precision(dims, spacing, orders, reg: float, dc_precision: float) -> np.ndarray:
    """reg * (Laplacian eigenvalue of B_m)^2 + dc_precision, flattened like the coefficients."""
    eig = []
    for n, h, o in zip(dims, spacing, orders):
        m = np.arange(o)
        eig.append((2.0 - 2.0 * np.cos(np.pi * m / n)) / h ** 2)
    lap = eig[0][:, None, None] + eig[1][None, :, None] + eig[2][None, None, :]
    return (reg * lap ** 2 + dc_precision).reshape(-1)


@dataclass
class BiasModel:
    """DCT coefficients per channel with a diagonal Gaussian prior."""

    orders: tuple[int, int, int]
    coeffs: np.ndarray
    prior_precision: np.ndarray
    prior_mean: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.orders = tuple(int(o) for o in self.orders)
        if len(self.orders) != 3 or min(self.orders) < 1:
            raise InvalidInputError(f"basis orders must be >= 1 on 3 axes, got {self.orders}")
        size = int(np.prod(self.orders))
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        if self.coeffs.shape[1] != size:
            raise InvalidInputError(f"expected {size} coefficients per channel, got {self.coeffs.shape[1]}")
        self.prior_precision = np.asarray(self.prior_precision, dtype=np.float64).reshape(size)
        if np.any(self.prior_precision < 0):
            raise InvalidInputError("bias prior precision must be non-negative")
        if self.prior_mean is None:
            self.prior_mean = np.zeros(size)

    @property
    def channels(self) -> int:
        return int(self.coeffs.shape[0])

    @classmethod
    def for_grid(cls, dims, spacing, channels: int, period_mm: float = 60.0, reg: float = 1e3,
                 dc_precision: float = 1e-4, orders=None) -> "BiasModel":
        orders = tuple(orders) if orders else orders_for_grid(dims, spacing, period_mm)
        orders = tuple(min(int(o), int(n)) for o, n in zip(orders, dims))
        precision = bending_precision(dims, spacing, orders, reg, dc_precision)
        return cls(orders, np.zeros((channels, int(np.prod(orders)))), precision)

    def copy(self) -> "BiasModel":
        return BiasModel(self.orders, self.coeffs.copy(), self.prior_precision.copy(), self.prior_mean.copy())

    def log_prior(self) -> float:
        diff = self.coeffs - self.prior_mean[None, :]
        return float(-0.5 * np.sum(diff ** 2 * self.prior_precision[None, :]))


def evaluate_bias(model: BiasModel, dims) -> np.ndarray:
    """Positive field (nx, ny, nz, D)."""
    dims = tuple(int(n) for n in dims)
    if not np.all(np.isfinite(model.coeffs)):
        raise InvalidInputError("bias coefficients must be finite")
    if any(o > n for o, n in zip(model.orders, dims)):
        raise InvalidInputError(f"grid {dims} is smaller than the basis {model.orders}")
    log_b = _design_matrix(dims, model.orders) @ model.coeffs.T
    return np.exp(log_b).reshape(dims + (model.channels,))


def modulated_gaussian(mean: np.ndarray, cov: np.ndarray, bias: np.ndarray):
    """Class mean and covariance seen in uncorrected intensities: b^-1 mu, b^-1 Sigma b^-1."""
    bias = np.asarray(bias, dtype=np.float64)
    if np.any(bias <= 0):
        raise InvalidInputError("bias entries must be > 0")
    inv_b = 1.0 / bias
    return inv_b * mean, cov * np.outer(inv_b, inv_b)


def bias_objective(values: np.ndarray, observed: np.ndarray, gamma: np.ndarray,
                   bundle: GaussWishartBundle, model: BiasModel, dims) -> float:
    """Bound terms that depend on the bias: expected log-likelihood, log-Jacobian, prior."""
    bias = evaluate_bias(model, dims).reshape(-1, model.channels)
    corrected = np.where(observed, values * bias, 0.0)
    log_lik = expected_log_likelihood(corrected, observed, bundle)
    log_jac = np.sum(np.log(bias)[observed])
    return float(np.sum(gamma * log_lik) + log_jac + model.log_prior())


def bias_grad_hess(values: np.ndarray, observed: np.ndarray, gamma: np.ndarray,
                   bundle: GaussWishartBundle, model: BiasModel, dims, channel: int):
    """Gradient and Gauss-Newton Hessian of bias_objective in one channel's coefficients."""
    design = _design_matrix(tuple(int(n) for n in dims), model.orders)
    bias = np.exp(design @ model.coeffs.T)
    corrected = np.where(observed, values * bias, 0.0)
    first = np.zeros(values.shape[0])
    second = np.zeros(values.shape[0])
    for pattern, idx in missing_patterns(observed):
        if not pattern[channel]:
            continue
        hidden = ~pattern
        obs_pos = int(np.flatnonzero(pattern).tolist().index(channel))
        o = corrected[np.ix_(idx, pattern)]
        xd = corrected[idx, channel]
        for k in range(bundle.K):
            W = bundle.W[k]
            if hidden.any():
                W_oh = W[np.ix_(pattern, hidden)]
                schur = W[np.ix_(pattern, pattern)] - W_oh @ np.linalg.solve(W[np.ix_(hidden, hidden)], W_oh.T)
            else:
                schur = W
            resid = (o - bundle.m[k, pattern][None, :]) @ schur[:, obs_pos]
            weight = gamma[idx, k] * bundle.nu[k]
            first[idx] -= weight * resid * xd
            second[idx] += weight * schur[obs_pos, obs_pos] * xd ** 2
        first[idx] += 1.0
    diff = model.coeffs[channel] - model.prior_mean
    grad = design.T @ first - model.prior_precision * diff
    hess = design.T @ (second[:, None] * design) + np.diag(model.prior_precision)
    return grad, hess


@dataclass
class BiasUpdate:
    model: BiasModel
    delta: float
    accepted: bool
    damping: float
    flags: list = field(default_factory=list)


def gauss_newton_bias_update(values: np.ndarray, observed: np.ndarray, gamma: np.ndarray,
                             bundle: GaussWishartBundle, model: BiasModel, dims,
                             damping: float = 1e-2, max_backtracks: int = 8) -> BiasUpdate:
    """One damped Gauss-Newton step per channel, each kept only if the objective does not drop."""
    current = model.copy()
    start = bias_objective(values, observed, gamma, bundle, current, dims)
    best = start
    flags: list[str] = []
    any_accepted = False
    for d in range(model.channels):
        if not observed[:, d].any():
            continue
        grad, hess = bias_grad_hess(values, observed, gamma, bundle, current, dims, d)
        scale = float(np.mean(np.diag(hess))) or 1.0
        step = None
        for _ in range(max_backtracks + 1):
            try:
                step = linalg.solve(hess + damping * scale * np.eye(hess.shape[0]), grad, assume_a="pos")
                break
            except linalg.LinAlgError:
                damping *= 10.0
        if step is None:
            flags.append(f"singular:{d}")
            continue

        accepted = False
        factor = 1.0
        for attempt in range(max_backtracks + 1):
            trial = current.copy()
            trial.coeffs[d] = current.coeffs[d] + factor * step
            value = bias_objective(values, observed, gamma, bundle, trial, dims)
            if np.isfinite(value) and value >= best:
                current, best, accepted = trial, value, True
                break
            factor *= 0.5
        if accepted:
            any_accepted = True
            damping = max(damping * 0.1, 1e-8) if attempt == 0 else damping
        else:
            damping *= 10.0
            flags.append(f"rejected:{d}")
            logger.debug("Bias step for channel %d rejected after %d halvings", d, max_backtracks)
    return BiasUpdate(current, best - start, any_accepted, damping, flags)
