"""Radial trajectories, spoke ordering, excitation masks and density compensation."""

from __future__ import annotations

import logging

import numpy as np
from scipy import sparse, spatial

from .errors import DimensionError, NumericalError
from .models import ExcitationMasks, GridSpec, Trajectory
from .nufft import KERNEL_WIDTH, OVERSAMPLING, Gridder, kaiser_bessel

logger = logging.getLogger(__name__)

DENSITY_EPS = 1e-12
DC_RADIUS = 0.5   # samples with max(|k_x|, |k_y|) <= DC_RADIUS share the DC cell
SUPPORT_TOL = 1e-9  # relative; samples exactly one kernel radius apart stay uncoupled


def radial_trajectory(n_spokes: int, n_readout: int, grid: GridSpec, ordered: bool = True) -> Trajectory:
    """Evenly spaced spokes; acquisition order is van der Corput unless ``ordered`` is False."""
    if n_spokes < 1:
        raise ValueError(f"need at least one spoke, got {n_spokes}")
    if n_readout < 2:
        raise ValueError(f"need at least two readout samples, got {n_readout}")
    angles = np.arange(n_spokes) * np.pi / n_spokes
    order = van_der_corput_order(n_spokes) if ordered else np.arange(n_spokes)
    return Trajectory(grid.n, n_readout, angles, order)


def _bit_reverse(value: int, bits: int) -> int:
    return int(format(value, f"0{bits}b")[::-1], 2) if bits else 0


def van_der_corput_order(n_spokes: int) -> np.ndarray:
    """Low-discrepancy acquisition order: step -> spoke index.

    Powers of two use the base-2 radical inverse; other counts repeatedly
    fill the largest circular gap between already acquired spokes.
    """
    if n_spokes < 1:
        raise ValueError(f"need at least one spoke, got {n_spokes}")
    bits = n_spokes.bit_length() - 1
    if n_spokes == 1 << bits:
        return np.array([_bit_reverse(i, bits) for i in range(n_spokes)], dtype=np.int64)

    chosen = [0]
    while len(chosen) < n_spokes:
        ordered = sorted(chosen)
        gaps = [((ordered[(i + 1) % len(ordered)] - a) % n_spokes or n_spokes, a)
                for i, a in enumerate(ordered)]
        gap, start = min(gaps, key=lambda g: (-g[0], g[1]))
        # Spoke nearest the middle of the widest gap, earlier offset on ties
        offset = min(range(1, gap), key=lambda d: (abs(d - gap / 2), d))
        chosen.append((start + offset) % n_spokes)
    return np.array(chosen, dtype=np.int64)


def nearest_grid(coords: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Centered-grid (row, col) of the nearest frequencies; points off the grid are dropped."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    kappa = np.sign(coords) * np.floor(np.abs(coords) + 0.5)   # round half away from zero
    index = kappa.astype(np.int64) + grid.n // 2
    on_grid = np.all((index >= 0) & (index < grid.n), axis=1)
    return index[on_grid, 1], index[on_grid, 0]


def nearest_grid_mask(coords: np.ndarray, grid: GridSpec) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    rows, cols = nearest_grid(coords, grid)
    mask[rows, cols] = True
    return mask


def partition_excitations(traj: Trajectory, n_exc: int, grid: GridSpec) -> ExcitationMasks:
    """Split the acquisition order into contiguous per-excitation spoke blocks."""
    if n_exc < 1:
        raise ValueError(f"need at least one excitation, got {n_exc}")
    if traj.n_spokes % n_exc:
        raise DimensionError(f"{traj.n_spokes} spokes cannot be split into {n_exc} excitations")
    if traj.n != grid.n:
        raise DimensionError(f"trajectory built for N={traj.n}, grid has N={grid.n}")
    blocks = tuple(np.array(b) for b in np.split(traj.order, n_exc))
    masks = np.stack([nearest_grid_mask(traj.spoke_coords(b), grid) for b in blocks])
    result = ExcitationMasks(blocks, masks)
    logger.debug("partitioned %d spokes into %d excitations, M_i = %s",
                 traj.n_spokes, n_exc, result.counts.tolist())
    return result


def _density_kernel(coords: np.ndarray) -> sparse.csr_matrix:
    """Symmetric (M, M) matrix of Kaiser-Bessel weights between sample pairs.

    The kernel is the gridding kernel as a function of Euclidean sample
    distance, so its support radius is KERNEL_WIDTH / (2·OVERSAMPLING) in
    cycles per field of view. Pairs on that radius or beyond do not couple.
    """
    n_samples = coords.shape[0]
    radius = KERNEL_WIDTH / (2 * OVERSAMPLING)
    pairs = spatial.cKDTree(coords).query_pairs(radius * (1.0 - SUPPORT_TOL), output_type="ndarray")
    first, second = pairs[:, 0], pairs[:, 1]
    distance = np.hypot(*(coords[first] - coords[second]).T)
    values = kaiser_bessel(OVERSAMPLING * distance)
    diagonal = np.arange(n_samples)
    rows = np.concatenate([first, second, diagonal])
    cols = np.concatenate([second, first, diagonal])
    vals = np.concatenate([values, values, np.ones(n_samples)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_samples, n_samples))


def pipe_dcf(coords: np.ndarray, grid: GridSpec, iters: int = 10) -> np.ndarray:
    """Pipe fixed-point density weights w <- w / (C w) for one sample set.

    C convolves the weights with the Kaiser-Bessel gridding kernel directly
    between sample positions (see :func:`_density_kernel`). Weights are scaled
    so the samples inside the DC cell sum to one.
    """
    if iters < 1:
        raise ValueError(f"need at least one DCF iteration, got {iters}")
    gridder = Gridder(coords, grid.n)
    kernel = _density_kernel(gridder.coords)
    weights = np.ones(gridder.n_samples)
    for step in range(iters):
        density = kernel @ weights
        if np.any(density < DENSITY_EPS):
            raise NumericalError(f"interpolated density vanished at DCF iteration {step}")
        weights = weights / density
    dc = np.max(np.abs(gridder.coords), axis=1) <= DC_RADIUS
    if dc.any():
        weights = weights / weights[dc].sum()
    return weights
