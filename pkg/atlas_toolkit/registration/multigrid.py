"""Multigrid-preconditioned solver for Gauss-Newton velocity systems (H + L^T L + lambda I) x = b.

H is block diagonal (one 3x3 block per voxel). Grids are periodic, so vectors
move between levels by Fourier truncation and zero padding, and every coarse
level keeps the fine symbol of L^T L on the frequencies it can hold. Blocks
are carried down by full weighting. Smoothing is Chebyshev-accelerated block
Jacobi aimed at the frequencies the next level cannot represent; the first
level small enough is factorized densely. A full-multigrid pass supplies the
initial guess; conjugate gradients with one V-cycle per iteration as
preconditioner finish the solve.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft, linalg

from ..core.errors import InvalidInputError
from .operator import OperatorSpec, apply_symbol, operator_symbol

logger = logging.getLogger("atlas-toolkit")

DENSE_LIMIT = 3000
SMOOTHING_DEGREE = 6
COARSE_DEGREE = 20
FMG_CYCLES = 2
MIN_CONTRACTION = 10.0
STAGNATION_PASSES = 3


def coarsen_axes(dims) -> tuple[int, ...]:
    return tuple(a for a, n in enumerate(dims) if n % 2 == 0 and n >= 4)


def _coarse_index(n: int) -> np.ndarray:
    """Fine FFT index of each frequency on the grid of n // 2 samples."""
    half = n // 2
    j = np.arange(half)
    return np.where(j <= half // 2, j, j + half)


def _kept(half: int) -> np.ndarray:
    """Coarse frequencies shared by both grids (the coarse Nyquist is dropped)."""
    keep = np.ones(half, dtype=bool)
    if half % 2 == 0:
        keep[half // 2] = False
    return keep


def restrict(x: np.ndarray, axes) -> np.ndarray:
    """Periodic Fourier truncation onto the grid half as fine along `axes`."""
    for a in axes:
        half = x.shape[a] // 2
        spectrum = np.take(fft.fft(x, axis=a), _coarse_index(x.shape[a]), axis=a)
        shape = [1] * x.ndim
        shape[a] = half
        spectrum = spectrum * _kept(half).reshape(shape)
        x = 0.5 * fft.ifft(spectrum, axis=a).real
    return x


def prolong(x: np.ndarray, axes) -> np.ndarray:
    """Periodic Fourier interpolation onto the grid twice as fine along `axes`.

    Adjoint of restrict up to a factor 2 per axis.
    """
    for a in axes:
        half = x.shape[a]
        shape = list(x.shape)
        shape[a] = 2 * half
        spectrum = np.zeros(shape, dtype=np.complex128)
        index = [slice(None)] * x.ndim
        index[a] = _coarse_index(2 * half)[_kept(half)]
        source = np.compress(_kept(half), fft.fft(x, axis=a), axis=a)
        spectrum[tuple(index)] = source
        x = 2.0 * fft.ifft(spectrum, axis=a).real
    return x


def average_blocks(blocks: np.ndarray, axes) -> np.ndarray:
    """Periodic (1/4, 1/2, 1/4) full weighting, then every second sample.

    Convex weights keep positive semi-definite blocks PSD.
    """
    for a in axes:
        blocks = 0.25 * np.roll(blocks, 1, axis=a) + 0.5 * blocks + 0.25 * np.roll(blocks, -1, axis=a)
        blocks = np.take(blocks, np.arange(0, blocks.shape[a], 2), axis=a)
    return blocks


def _rough_mask(dims, axes) -> np.ndarray:
    """Frequencies of a level that the next coarser level cannot hold."""
    if not axes:
        return np.ones(tuple(dims), dtype=bool)
    rough = np.zeros(tuple(dims), dtype=bool)
    for a in axes:
        n = dims[a]
        k = np.arange(n)
        shape = [1, 1, 1]
        shape[a] = n
        rough |= (np.minimum(k, n - k) > (n // 2 - 1) // 2).reshape(shape)
    return rough


@dataclass
class GNSystem:
    """Voxel blocks (nx, ny, nz, 3, 3), regularizer and Levenberg damping.

    `symbol` defaults to the regularizer's symbol on the blocks' grid; coarse
    levels carry the fine symbol restricted to their frequencies.
    """

    blocks: np.ndarray
    spec: OperatorSpec
    damping: float = 0.0
    axes: tuple = ()
    symbol: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim != 5 or self.blocks.shape[3:] != (3, 3):
            raise InvalidInputError(f"Hessian blocks must be (nx, ny, nz, 3, 3), got {self.blocks.shape}")
        if self.damping < 0:
            raise InvalidInputError("damping must be non-negative")
        if self.symbol is None:
            self.symbol = operator_symbol(self.spec, self.dims)
        elif self.symbol.shape != self.dims + (3, 3):
            raise InvalidInputError(f"symbol shape {self.symbol.shape} does not match blocks {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.blocks.shape[:3])

    @property
    def size(self) -> int:
        return int(np.prod(self.dims)) * 3

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.blocks, x) + apply_symbol(self.symbol, x) + self.damping * x

    def coarsened(self) -> Optional["GNSystem"]:
        axes = coarsen_axes(self.dims)
        if not axes:
            return None
        symbol = self.symbol
        for a in axes:
            symbol = np.take(symbol, _coarse_index(symbol.shape[a]), axis=a)
        return GNSystem(average_blocks(self.blocks, axes), self.spec, self.damping, axes, symbol)

    def centre(self) -> np.ndarray:
        """3x3 coefficient coupling a voxel to itself in L^T L."""
        return np.real(self.symbol.mean(axis=(0, 1, 2)))

    def diagonal_blocks(self) -> np.ndarray:
        return self.blocks + self.centre() + self.damping * np.eye(3)

    def smoothing_interval(self, axes) -> tuple[float, float]:
        """Spectral range of (diagonal blocks)^-1 x system to damp ahead of coarsening along `axes`.

        The upper end bounds the whole spectrum for any PSD blocks; the lower
        end is the smallest eigenvalue among frequencies the coarse grid drops
        when the blocks vanish.
        """
        eig = np.linalg.eigvalsh(self.symbol)
        centre = np.linalg.eigvalsh(self.centre())
        floor = max(float(centre.min()) + self.damping, 1e-300)
        upper = max(1.0, (float(eig.max()) + self.damping) / floor)
        rough = eig[_rough_mask(self.dims, axes)]
        lower = (float(rough.min()) + self.damping) / (float(centre.max()) + self.damping)
        return min(max(lower, 1e-3 * upper), 0.5 * upper), upper

    def dense_matrix(self) -> np.ndarray:
        """Explicit (3N, 3N) matrix, C-order voxels with components innermost."""
        dims = self.dims
        n = int(np.prod(dims))
        kernel = fft.ifftn(self.symbol, axes=(0, 1, 2)).real.reshape(n, 3, 3)
        coords = np.indices(dims).reshape(3, n)
        offsets = (coords[:, :, None] - coords[:, None, :]) % np.asarray(dims)[:, None, None]
        out = kernel[np.ravel_multi_index(tuple(offsets), dims)].transpose(0, 2, 1, 3).copy()
        voxel = np.arange(n)
        out[voxel, :, voxel, :] += self.blocks.reshape(n, 3, 3)
        out = out.reshape(3 * n, 3 * n) + self.damping * np.eye(3 * n)
        return 0.5 * (out + out.T)


class _Level:
    def __init__(self, system: GNSystem, coarse_axes: Optional[tuple]):
        self.system = system
        self.factor = None
        self.dense = None
        coarsest = coarse_axes is None
        if coarsest and system.size <= DENSE_LIMIT:
            dense = system.dense_matrix()
            try:
                self.factor = linalg.cho_factor(dense)
            except linalg.LinAlgError:
                self.dense = dense
            return
        self.inv_blocks = np.linalg.inv(system.diagonal_blocks())
        self.interval = system.smoothing_interval(() if coarsest else coarse_axes)
        self.degree = COARSE_DEGREE if coarsest else SMOOTHING_DEGREE

    def precondition(self, r: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.inv_blocks, r)

    def smooth(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Chebyshev iteration on the block-Jacobi preconditioned system."""
        lower, upper = self.interval
        theta = 0.5 * (upper + lower)
        delta = 0.5 * (upper - lower)
        sigma = theta / delta
        rho = 1.0 / sigma
        r = b - self.system.apply(x)
        d = self.precondition(r) / theta
        for k in range(self.degree):
            x = x + d
            if k == self.degree - 1:
                break
            r = r - self.system.apply(d)
            rho_next = 1.0 / (2.0 * sigma - rho)
            d = rho_next * rho * d + (2.0 * rho_next / delta) * self.precondition(r)
            rho = rho_next
        return x

    def solve_coarsest(self, b: np.ndarray, x: Optional[np.ndarray] = None) -> np.ndarray:
        if self.factor is not None:
            return linalg.cho_solve(self.factor, b.ravel()).reshape(b.shape)
        if self.dense is not None:
            return linalg.lstsq(self.dense, b.ravel())[0].reshape(b.shape)
        return self.smooth(np.zeros_like(b) if x is None else x, b)


def build_hierarchy(system: GNSystem) -> list[_Level]:
    """Coarsen until a level fits the dense solver or no axis can halve."""
    systems = [system]
    while systems[-1].size > DENSE_LIMIT:
        coarse = systems[-1].coarsened()
        if coarse is None:
            break
        systems.append(coarse)
    return [
        _Level(s, systems[depth + 1].axes if depth + 1 < len(systems) else None)
        for depth, s in enumerate(systems)
    ]


def vcycle(levels: list[_Level], b: np.ndarray, x: Optional[np.ndarray] = None, depth: int = 0) -> np.ndarray:
    level = levels[depth]
    if depth == len(levels) - 1:
        return level.solve_coarsest(b, x)
    x = np.zeros_like(b) if x is None else x
    x = level.smooth(x, b)
    axes = levels[depth + 1].system.axes
    residual = b - level.system.apply(x)
    x = x + prolong(vcycle(levels, restrict(residual, axes), None, depth + 1), axes)
    return level.smooth(x, b)


def full_multigrid(levels: list[_Level], b: np.ndarray) -> np.ndarray:
    rhs = [b]
    for depth in range(1, len(levels)):
        rhs.append(restrict(rhs[-1], levels[depth].system.axes))
    x = levels[-1].solve_coarsest(rhs[-1])
    for depth in range(len(levels) - 2, -1, -1):
        x = prolong(x, levels[depth + 1].system.axes)
        for _ in range(FMG_CYCLES):
            x = vcycle(levels, rhs[depth], x, depth)
    return x


@dataclass
class MultigridResult:
    solution: np.ndarray
    residuals: list[float] = field(default_factory=list)
    converged: bool = False
    stagnated: bool = False
    flags: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return max(len(self.residuals) - 1, 0)

    @property
    def contraction(self) -> float:
        """Residual reduction of the full-multigrid pass."""
        if len(self.residuals) < 2:
            return float("inf")
        return self.residuals[0] / max(self.residuals[1], 1e-300)


def multigrid_solve(rhs: np.ndarray, system: GNSystem, tol: float = 1e-6, max_cycles: int = 30) -> MultigridResult:
    """Solve system x = rhs to ||r|| <= tol ||rhs|| or until the iteration stalls."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != system.dims + (3,):
        raise InvalidInputError(f"rhs shape {rhs.shape} does not match system {system.dims}")
    if min(system.dims) < 4:
        raise InvalidInputError(f"multigrid needs >= 4 voxels per axis, got {system.dims}")
    norm_b = float(np.linalg.norm(rhs))
    if norm_b == 0.0:
        return MultigridResult(np.zeros_like(rhs), [0.0], converged=True)

    levels = build_hierarchy(system)
    x = full_multigrid(levels, rhs)
    r = rhs - system.apply(x)
    history = [norm_b, float(np.linalg.norm(r))]
    result = MultigridResult(x, history)
    if result.contraction < MIN_CONTRACTION:
        result.flags.append("slow-contraction")
        logger.warning("Full-multigrid pass reduced the residual only %.3gx on %s", result.contraction, system.dims)

    best_x, best_norm = x.copy(), history[-1]
    stalled = 0
    z = vcycle(levels, r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for _ in range(max_cycles):
        if best_norm <= tol * norm_b:
            break
        Ap = system.apply(p)
        curvature = float(np.vdot(p, Ap))
        if curvature <= 0 or rz <= 0:
            break
        alpha = rz / curvature
        x = x + alpha * p
        r = r - alpha * Ap
        norm_r = float(np.linalg.norm(r))
        history.append(norm_r)
        if norm_r < best_norm:
            best_x, best_norm = x.copy(), norm_r
            stalled = 0
        else:
            stalled += 1
            if stalled >= STAGNATION_PASSES:
                result.stagnated = True
                break
        z = vcycle(levels, r)
        rz_next = float(np.vdot(r, z))
        p = z + (rz_next / rz) * p
        rz = rz_next

    result.solution = best_x
    result.converged = best_norm <= tol * norm_b
    if result.stagnated:
        result.flags.append("stagnated")
        logger.warning("Multigrid stalled at relative residual %.3g; returning best iterate", best_norm / norm_b)
    return result
