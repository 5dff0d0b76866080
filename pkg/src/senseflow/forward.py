"""Coil synthesis, the motion forward operator, its adjoint, residuum and noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .deform import warp_matrix
from .errors import DimensionError
from .models import (
    CoilMaps,
    DeformationField,
    DeformationSequence,
    ExcitationMasks,
    GridSpec,
    Image,
    KSpaceData,
    OperatorPath,
    Trajectory,
)
from .nufft import Gridder, fft2c, ifft2c
from .rng import STREAM_COILS, STREAM_NOISE, Rng
from .sampling import nearest_grid, partition_excitations, pipe_dcf

logger = logging.getLogger(__name__)

COIL_RING = 0.45          # coil centers on a ring of this radius, in units of N
COIL_WIDTH = (0.5, 1.5)   # d_c range in units of (N/2)²


def synth_coils(n_coils: int, grid: GridSpec, rng: Rng, widths: Sequence[float] | None = None) -> CoilMaps:
    """Real Gaussian sensitivities S_c(r) = exp(-|r - r_c|² / d_c)."""
    if n_coils < 1:
        raise ValueError(f"need at least one coil, got {n_coils}")
    gen = rng.generator(STREAM_COILS)
    phase = gen.uniform(0.0, 2 * np.pi)
    angles = phase + 2 * np.pi * np.arange(n_coils) / n_coils
    centers = COIL_RING * grid.n * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    drawn = gen.uniform(*COIL_WIDTH, size=n_coils) * (grid.n / 2) ** 2
    d = drawn if widths is None else np.asarray(widths, dtype=float)
    x, y = grid.coordinates()
    maps = np.stack([
        np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / dc) for (cx, cy), dc in zip(centers, d)
    ])
    return CoilMaps(grid, maps, centers, d)


@dataclass
class MotionProblem:
    """Everything the operators need: geometry, coils, measured data and NUFFT plans."""
    grid: GridSpec
    trajectory: Trajectory
    masks: ExcitationMasks
    coils: CoilMaps
    path: OperatorPath
    data: KSpaceData | None = None
    gridders: tuple[Gridder, ...] = ()
    dcf: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        if self.coils.grid != self.grid:
            raise DimensionError("coil maps and problem grid differ")
        if self.masks.masks.shape[1:] != self.grid.shape:
            raise DimensionError("excitation masks and problem grid differ")
        if self.path is OperatorPath.NUFFT and len(self.gridders) != self.n_exc:
            raise DimensionError("the NUFFT path needs one gridder per excitation")
        if self.data is not None and self.data.values.shape != self.data_shape:
            raise DimensionError(f"data {self.data.values.shape} does not match {self.data_shape}")

    @property
    def n_exc(self) -> int:
        return self.masks.n_exc

    @property
    def n_coils(self) -> int:
        return self.coils.n_coils

    @property
    def data_shape(self) -> tuple[int, ...]:
        if self.path is OperatorPath.DFFT:
            return (self.n_exc, self.n_coils) + self.grid.shape
        return (self.n_exc, self.n_coils, self.gridders[0].n_samples)

    @property
    def support(self) -> np.ndarray:
        """Boolean support broadcastable against the data array."""
        if self.path is OperatorPath.DFFT:
            return self.masks.masks[:, None]
        return np.ones((self.n_exc, 1, self.gridders[0].n_samples), dtype=bool)

    @cached_property
    def sqrt_dcf(self) -> tuple[np.ndarray, ...]:
        return tuple(np.sqrt(w) for w in self.dcf)

    @cached_property
    def kappa(self) -> np.ndarray:
        """Per-excitation diagonal value κ_i of F^* A_i^* A_i F."""
        if self.path is OperatorPath.DFFT:
            return self.masks.counts / self.grid.n ** 2
        delta = np.zeros(self.grid.shape)
        center = self.grid.n // 2
        delta[center, center] = 1.0
        values = []
        for gridder, weights in zip(self.gridders, self.dcf):
            response = gridder.adjoint(weights * gridder.forward(delta))
            values.append(response[center, center].real)
        logger.debug("NUFFT kappa from point response: %s", np.round(values, 6).tolist())
        return np.array(values)

    def empty_data(self) -> KSpaceData:
        return KSpaceData(np.zeros(self.data_shape, dtype=np.complex128), self.support, self.path)

    def with_data(self, data: KSpaceData) -> MotionProblem:
        return replace(self, data=data)

    def require_data(self) -> KSpaceData:
        if self.data is None:
            raise DimensionError("problem carries no measured data")
        return self.data

    def excitation(self, i: int) -> MotionProblem:
        """Subproblem holding only excitation i's spokes and data."""
        if not 0 <= i < self.n_exc:
            raise IndexError(f"excitation {i} out of range 0..{self.n_exc - 1}")
        masks = ExcitationMasks((self.masks.spokes[i],), self.masks.masks[i:i + 1])
        data = None
        if self.data is not None:
            values = self.data.values[i:i + 1]
            sampled = np.broadcast_to(self.data.sampled, self.data.values.shape)[i:i + 1, :1]
            data = KSpaceData(values, sampled, self.path, self.data.noise_level)
        return MotionProblem(
            self.grid, self.trajectory, masks, self.coils, self.path, data,
            self.gridders[i:i + 1], self.dcf[i:i + 1],
        )


def build_problem(
    grid: GridSpec,
    trajectory: Trajectory,
    n_exc: int,
    coils: CoilMaps,
    path: OperatorPath | str = OperatorPath.DFFT,
    dcf_iters: int = 10,
) -> MotionProblem:
    """Assemble masks, per-excitation gridders and density weights."""
    path = OperatorPath(path)
    masks = partition_excitations(trajectory, n_exc, grid)
    gridders: tuple[Gridder, ...] = ()
    dcf: tuple[np.ndarray, ...] = ()
    if path is OperatorPath.NUFFT:
        coords = [trajectory.spoke_coords(block) for block in masks.spokes]
        gridders = tuple(Gridder(c, grid.n) for c in coords)
        dcf = tuple(pipe_dcf(c, grid, dcf_iters) for c in coords)
    return MotionProblem(grid, trajectory, masks, coils, path, None, gridders, dcf)


def static_problem(grid: GridSpec, trajectory: Trajectory, coils: CoilMaps,
                   path: OperatorPath | str = OperatorPath.DFFT) -> MotionProblem:
    return build_problem(grid, trajectory, 1, coils, path)


@dataclass
class MotionOperator:
    """𝒜(U, ·) for one fixed deformation sequence, with cached warp matrices."""
    problem: MotionProblem
    fields: Sequence[DeformationField]
    warps: list = field(init=False)

    def __post_init__(self) -> None:
        if len(self.fields) != self.problem.n_exc:
            raise DimensionError(f"{len(self.fields)} fields for {self.problem.n_exc} excitations")
        if any(f.grid != self.problem.grid for f in self.fields):
            raise DimensionError("deformation grid and problem grid differ")
        self.warps = [warp_matrix(f) for f in self.fields]

    def coil_images(self, i: int, s: np.ndarray) -> np.ndarray:
        """(C, N, N) complex S_c · U_i[s]."""
        warped = (self.warps[i] @ s.ravel()).reshape(self.problem.grid.shape)
        return self.problem.coils.maps * warped

    def encode(self, i: int, images: np.ndarray) -> np.ndarray:
        """A_i F (or D^½ F_NU) applied to each coil image."""
        p = self.problem
        if p.path is OperatorPath.DFFT:
            return fft2c(images) * p.masks.masks[i]
        return np.stack([p.sqrt_dcf[i] * p.gridders[i].forward(img) for img in images])

    def decode(self, i: int, values: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`encode`: (C, ...) samples -> (C, N, N) complex images."""
        p = self.problem
        if p.path is OperatorPath.DFFT:
            return ifft2c(values * p.masks.masks[i])
        return np.stack([p.gridders[i].adjoint(p.sqrt_dcf[i] * v) for v in values])

    def forward(self, s: np.ndarray) -> np.ndarray:
        return np.stack([self.encode(i, self.coil_images(i, s)) for i in range(self.problem.n_exc)])

    def backproject(self, i: int, values: np.ndarray) -> np.ndarray:
        """Σ_c conj(S_c) · decode(values)_c, before the warp adjoint."""
        return np.sum(np.conj(self.problem.coils.maps) * self.decode(i, values), axis=0)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        grid = self.problem.grid
        out = np.zeros(grid.n ** 2)
        for i in range(self.problem.n_exc):
            out += self.warps[i].T @ self.backproject(i, values[i]).real.ravel()
        return out.reshape(grid.shape)


def as_fields(U: DeformationSequence | Sequence[DeformationField]) -> Sequence[DeformationField]:
    return U.fields if isinstance(U, DeformationSequence) else U


def forward(U: DeformationSequence, s: Image, problem: MotionProblem) -> KSpaceData:
    if s.grid != problem.grid:
        raise DimensionError(f"image grid {s.grid.n} and problem grid {problem.grid.n} differ")
    values = MotionOperator(problem, as_fields(U)).forward(s.values)
    return KSpaceData(values, problem.support, problem.path)


def adjoint(y: KSpaceData, U: DeformationSequence, problem: MotionProblem) -> np.ndarray:
    if y.values.shape != problem.data_shape:
        raise DimensionError(f"data {y.values.shape} does not match {problem.data_shape}")
    return MotionOperator(problem, as_fields(U)).adjoint(y.values)


def residual_blocks(R: KSpaceData) -> np.ndarray:
    """(n_exc, n_coils) squared norms of the residual blocks."""
    flat = R.values.reshape(R.n_exc, R.n_coils, -1)
    return np.sum(flat.real ** 2 + flat.imag ** 2, axis=2)


def residuum(U: DeformationSequence, s: Image, problem: MotionProblem) -> tuple[KSpaceData, float]:
    """R = y - 𝒜(U, s) and J = ‖R‖²."""
    y = problem.require_data()
    predicted = forward(U, s, problem)
    R = y.with_values(y.values - predicted.values)
    return R, float(residual_blocks(R).sum())


def add_noise(y: KSpaceData, level: float, rng: Rng) -> KSpaceData:
    """Complex Gaussian noise with per-component σ = level · RMS(|y|) / √2 on sampled entries."""
    if level < 0:
        raise ValueError(f"noise level must be nonnegative, got {level}")
    if level == 0:
        return y.with_values(y.values, noise_level=0.0, noise_power=0.0)
    sampled = np.broadcast_to(y.sampled, y.values.shape)
    magnitudes = np.abs(y.values[sampled])
    sigma = level * np.sqrt(np.mean(magnitudes ** 2)) / np.sqrt(2.0)
    gen = rng.generator(STREAM_NOISE)
    noise = np.zeros(y.values.shape, dtype=np.complex128)
    count = int(sampled.sum())
    noise[sampled] = sigma * (gen.standard_normal(count) + 1j * gen.standard_normal(count))
    power = float(np.sum(np.abs(noise) ** 2))
    logger.debug("added noise: level %.4f, sigma %.4g, power %.4g", level, sigma, power)
    return y.with_values(y.values + noise, noise_level=level, noise_power=power)


def forward_continuous(motion: Sequence[DeformationField], s: Image, problem: MotionProblem) -> KSpaceData:
    """Simulate every spoke under its own deformation state.

    ``motion[n]`` is the state during acquisition step n (trajectory order).
    On the DFFT path grid points hit by several spokes of one excitation
    receive the average of their simulated values.
    """
    traj = problem.trajectory
    if len(motion) != traj.n_spokes:
        raise DimensionError(f"{len(motion)} states for {traj.n_spokes} spokes")
    grid = problem.grid
    coil_maps = problem.coils.maps
    values = np.zeros(problem.data_shape, dtype=np.complex128)
    step = 0
    for i, block in enumerate(problem.masks.spokes):
        if problem.path is OperatorPath.DFFT:
            total = np.zeros((problem.n_coils,) + grid.shape, dtype=np.complex128)
            hits = np.zeros(grid.shape)
        for j, spoke in enumerate(block):
            warped = (warp_matrix(motion[step]) @ s.values.ravel()).reshape(grid.shape)
            images = coil_maps * warped
            step += 1
            if problem.path is OperatorPath.DFFT:
                rows, cols = nearest_grid(traj.spoke_coords([spoke]), grid)
                cell = np.zeros(grid.shape, dtype=bool)
                cell[rows, cols] = True
                total += fft2c(images) * cell
                hits += cell
            else:
                sl = slice(j * traj.n_readout, (j + 1) * traj.n_readout)
                gridder = Gridder(traj.spoke_coords([spoke]), grid.n)
                weights = problem.sqrt_dcf[i][sl]
                values[i, :, sl] = np.stack([weights * gridder.forward(img) for img in images])
        if problem.path is OperatorPath.DFFT:
            values[i] = total / np.maximum(hits, 1)
    return KSpaceData(values, problem.support, problem.path)
