"""Quadratic velocity regularizer L^T L on a periodic grid, applied in the Fourier domain.

Per frequency w the 3x3 symbol is

    lambda_zero I + (lambda_membrane + mu) Lap I + lambda_bending Lap^2 I + (mu + lambda) d^H d

with d_a = (exp(i w_a) - 1) / h_a the forward-difference symbol and Lap = |d|^2.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft

from ..core.errors import InvalidInputError


@dataclass(frozen=True)
class OperatorSpec:
    """Operator weights and the grid spacing (mm) they are discretized on."""

    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_zero: float = 1e-3
    lambda_membrane: float = 0.1
    lambda_bending: float = 0.5
    lambda_mu: float = 0.25
    lambda_lame: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        weights = self.weights()
        if any(w < 0 for w in weights):
            raise InvalidInputError(f"operator weights must be non-negative, got {weights}")
        if not any(w > 0 for w in weights):
            raise InvalidInputError("at least one operator weight must be positive")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidInputError(f"operator spacing must be 3 positive reals, got {self.spacing}")

    def weights(self) -> tuple[float, ...]:
        return (self.lambda_zero, self.lambda_membrane, self.lambda_bending, self.lambda_mu, self.lambda_lame)

    @classmethod
    def from_config(cls, config, spacing) -> "OperatorSpec":
        return cls(
            spacing=tuple(spacing),
            lambda_zero=config.lambda_zero,
            lambda_membrane=config.lambda_membrane,
            lambda_bending=config.lambda_bending,
            lambda_mu=config.lambda_mu,
            lambda_lame=config.lambda_lame,
        )


def _difference_symbols(dims, spacing) -> list[np.ndarray]:
    out = []
    for axis, (n, h) in enumerate(zip(dims, spacing)):
        omega = 2.0 * np.pi * np.arange(n) / n
        shape = [1, 1, 1]
        shape[axis] = n
        out.append(((np.exp(1j * omega) - 1.0) / h).reshape(shape))
    return out


@lru_cache(maxsize=32)
def operator_symbol(spec: OperatorSpec, dims: tuple) -> np.ndarray:
    """(nx, ny, nz, 3, 3) Hermitian PSD symbol of L^T L."""
    dims = tuple(int(n) for n in dims)
    d = [np.broadcast_to(s, dims) for s in _difference_symbols(dims, spec.spacing)]
    lap = sum(np.abs(s) ** 2 for s in d)
    scalar = spec.lambda_zero + (spec.lambda_membrane + spec.lambda_mu) * lap + spec.lambda_bending * lap ** 2
    symbol = np.zeros(dims + (3, 3), dtype=np.complex128)
    for a in range(3):
        symbol[..., a, a] += scalar
        for b in range(3):
            symbol[..., a, b] += (spec.lambda_mu + spec.lambda_lame) * np.conj(d[a]) * d[b]
    symbol.setflags(write=False)
    return symbol


@lru_cache(maxsize=32)
def green_symbol(spec: OperatorSpec, dims: tuple) -> np.ndarray:
    """Per-frequency pseudo-inverse of the symbol (the Green's operator K)."""
    green = np.linalg.pinv(operator_symbol(spec, dims), hermitian=True)
    green.setflags(write=False)
    return green


def apply_symbol(symbol: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Multiply u by a per-frequency 3x3 symbol in the Fourier domain."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[3] != 3:
        raise InvalidInputError(f"velocity must be (nx, ny, nz, 3), got {u.shape}")
    spectrum = fft.fftn(u, axes=(0, 1, 2))
    spectrum = np.einsum("...ij,...j->...i", symbol, spectrum)
    return fft.ifftn(spectrum, axes=(0, 1, 2)).real


def apply_LtL(u: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """Momentum m = L^T L u."""
    return apply_symbol(operator_symbol(spec, tuple(u.shape[:3])), u)


def apply_green(m: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """Velocity from momentum, v = K m."""
    return apply_symbol(green_symbol(spec, tuple(m.shape[:3])), m)


def penalty_energy(u: np.ndarray, spec: OperatorSpec) -> float:
    """0.5 * <u, L^T L u>, summed over voxels."""
    return 0.5 * float(np.vdot(u, apply_LtL(u, spec)))

