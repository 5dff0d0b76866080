"""First motion estimate from the per-excitation reconstructions.

Each excitation image s_i is registered against the reference image s_0
warped by the current estimate; the updates are then smoothed over the
excitation index. The registration step is pluggable through the
:class:`Refiner` protocol; :func:`classical_refiner` is a multiresolution
optical-flow registration with warping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage, signal

from .deform import apply, resample_values
from .errors import NumericalError
from .models import DeformationField, DeformationSequence, GridSpec, Image

logger = logging.getLogger(__name__)

# Horn-Schunck neighbourhood average (4-neighbours weighted 1/6, diagonals 1/12)
_HS_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]]) / 12.0
MIN_LEVEL_SIZE = 8


@dataclass(frozen=True)
class EstimateConfig:
    n_iter: int = 4
    levels: int = 3            # pyramid levels of the classical refiner
    sigma: float = 1.0         # px, pre-smoothing at every pyramid level
    warps: int = 3             # linearise-and-warp rounds per level
    flow_iters: int = 60       # Jacobi sweeps per warp
    smoothness: float = 0.02   # weight of ‖∇v‖² relative to normalised intensities
    window: int = 5            # excitations per temporal regression window
    polyorder: int = 2

    def __post_init__(self) -> None:
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.levels < 1:
            raise ValueError(f"pyramid needs at least one level, got {self.levels}")
        if self.smoothness <= 0:
            raise ValueError(f"smoothness must be positive, got {self.smoothness}")


class Refiner(Protocol):
    def __call__(self, warped: Image, target: Image, cfg: EstimateConfig) -> np.ndarray:
        """(2, N, N) additive update to the target coordinates of the warped image."""


def _downsample(values: np.ndarray) -> np.ndarray:
    n = values.shape[0] // 2
    return values.reshape(n, 2, n, 2).mean(axis=(1, 3))


def _pyramid(values: np.ndarray, cfg: EstimateConfig) -> list[np.ndarray]:
    levels = [ndimage.gaussian_filter(values, cfg.sigma, mode="nearest")]
    while len(levels) < cfg.levels and levels[-1].shape[0] // 2 >= MIN_LEVEL_SIZE \
            and levels[-1].shape[0] % 4 == 0:
        coarse = _downsample(levels[-1])
        levels.append(ndimage.gaussian_filter(coarse, cfg.sigma, mode="nearest"))
    return levels


def _shift_image(values: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """values sampled at x + flow(x), clamped at the border."""
    n = values.shape[0]
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    coords = np.stack([np.clip(rows + flow[1], 0, n - 1), np.clip(cols + flow[0], 0, n - 1)])
    return ndimage.map_coordinates(values, coords, order=1, mode="nearest")


def _refine_level(moving: np.ndarray, fixed: np.ndarray, flow: np.ndarray, cfg: EstimateConfig) -> np.ndarray:
    alpha = cfg.smoothness
    for _ in range(cfg.warps):
        moved = _shift_image(moving, flow)
        iy, ix = np.gradient(moved)
        it = moved - fixed
        denom = alpha + ix ** 2 + iy ** 2
        base = flow.copy()
        for _ in range(cfg.flow_iters):
            avg_x = ndimage.convolve(flow[0], _HS_KERNEL, mode="nearest")
            avg_y = ndimage.convolve(flow[1], _HS_KERNEL, mode="nearest")
            rho = it + ix * (avg_x - base[0]) + iy * (avg_y - base[1])
            flow = np.stack([avg_x - ix * rho / denom, avg_y - iy * rho / denom])
    return flow


def classical_refiner(warped: Image, target: Image, cfg: EstimateConfig) -> np.ndarray:
    """Coarse-to-fine Horn-Schunck flow v with warped(x + v(x)) ≈ target(x)."""
    scale = max(float(warped.values.max()), float(target.values.max()))
    if scale == 0.0:
        return np.zeros((2,) + warped.grid.shape)
    moving = _pyramid(warped.values / scale, cfg)
    fixed = _pyramid(target.values / scale, cfg)
    flow = np.zeros((2,) + moving[-1].shape)
    for level in range(len(moving) - 1, -1, -1):
        n = moving[level].shape[0]
        if flow.shape[-1] != n:
            flow = 2.0 * resample_values(flow, GridSpec(flow.shape[-1]), GridSpec(n))
        flow = _refine_level(moving[level], fixed[level], flow, cfg)
    return flow


def temporal_smooth(displacements: np.ndarray, cfg: EstimateConfig) -> np.ndarray:
    """Local quadratic regression of (n_exc, 2, N, N) displacements over the excitation index."""
    n_exc = displacements.shape[0]
    window = min(cfg.window, n_exc if n_exc % 2 else n_exc - 1)
    if window <= cfg.polyorder:
        smoothed = displacements.copy()
    else:
        smoothed = signal.savgol_filter(displacements, window, cfg.polyorder, axis=0, mode="interp")
    smoothed[0] = 0.0
    return smoothed


def _displacements(sequence: DeformationSequence) -> np.ndarray:
    return np.stack([np.stack(f.displacement) for f in sequence])


def estimate_motion(
    s_list: Sequence[Image],
    cfg: EstimateConfig | None = None,
    refiner: Refiner = classical_refiner,
    initial: DeformationSequence | None = None,
) -> DeformationSequence:
    """Register every s_i (i >= 1) against the warped s_0, then smooth over time."""
    cfg = cfg or EstimateConfig()
    if len(s_list) < 2:
        raise ValueError(f"motion estimation needs at least two excitations, got {len(s_list)}")
    grid = s_list[0].grid
    estimate = DeformationSequence.identity(grid, len(s_list)) if initial is None else initial
    displacement = _displacements(estimate)

    for k in range(cfg.n_iter):
        for i in range(1, len(s_list)):
            current = DeformationField.from_displacement(grid, *displacement[i])
            update = refiner(apply(current, s_list[0]), s_list[i], cfg)
            if not np.all(np.isfinite(update)):
                raise NumericalError(f"refiner returned a non-finite update for excitation {i}")
            displacement[i] += update
        displacement = temporal_smooth(displacement, cfg)
        logger.debug("estimate iteration %d: mean |d| = %.4f px", k,
                     float(np.mean(np.hypot(displacement[:, 0], displacement[:, 1]))))

    return DeformationSequence(tuple(
        DeformationField.from_displacement(grid, d[0], d[1]) for d in displacement
    ))
