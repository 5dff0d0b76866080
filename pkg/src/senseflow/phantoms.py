"""Synthetic reference images."""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .models import GridSpec, Image, PhantomKind
from .rng import STREAM_PHANTOM, Rng

logger = logging.getLogger(__name__)

# Modified Shepp-Logan (Toft): intensity, semi-axis a, semi-axis b, x0, y0, angle (deg),
# in units of the half field of view.
SHEPP_LOGAN_ELLIPSES: tuple[tuple[float, float, float, float, float, float], ...] = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)

DISK_COUNT = 5
BODY_INTENSITY = 0.3
EDGE_SIGMA = 1.0  # px, softens disk edges so registration sees gradients


def ellipse_mask(x: np.ndarray, y: np.ndarray, ellipse, scale: float) -> np.ndarray:
    _, a, b, x0, y0, angle = ellipse
    theta = np.deg2rad(angle)
    dx, dy = x - x0 * scale, y - y0 * scale
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2 <= 1.0


def shepp_logan(grid: GridSpec) -> Image:
    """Modified Shepp-Logan, upright when row 0 is drawn at the top."""
    x, y = grid.coordinates()
    values = np.zeros(grid.shape)
    for ellipse in SHEPP_LOGAN_ELLIPSES:
        values[ellipse_mask(x, -y, ellipse, grid.n / 2)] += ellipse[0]
    # Overlapping -0.2 / +0.2 regions cancel to tiny negatives in floating point
    return Image.clipped(grid, values)


def disks(grid: GridSpec, rng: Rng) -> Image:
    """Soft-edged body with five seeded inner disks of distinct intensities.

    The edge blur leaves almost no energy outside the disc of radius N/2 in
    k-space, so a Nyquist-dense radial scan recovers it to high accuracy.
    """
    gen = rng.generator(STREAM_PHANTOM)
    x, y = grid.coordinates()
    r = np.hypot(x, y)
    values = np.where(r <= 0.42 * grid.n, BODY_INTENSITY, 0.0)

    intensities = gen.permutation(np.linspace(0.5, 1.0, DISK_COUNT))
    for level in intensities:
        radius = gen.uniform(0.05, 0.1) * grid.n
        distance = gen.uniform(0.0, 0.28 * grid.n)
        angle = gen.uniform(0.0, 2 * np.pi)
        cx, cy = distance * np.cos(angle), distance * np.sin(angle)
        values = np.where(np.hypot(x - cx, y - cy) <= radius, level, values)

    values = ndimage.gaussian_filter(values, EDGE_SIGMA, mode="constant")
    return Image.clipped(grid, values)


def make_phantom(kind: PhantomKind | str, grid: GridSpec, rng: Rng | None = None) -> Image:
    kind = PhantomKind(kind)
    logger.debug("phantom %s on %dx%d grid", kind.value, grid.n, grid.n)
    if kind is PhantomKind.SHEPP_LOGAN:
        return shepp_logan(grid)
    if kind is PhantomKind.DISKS:
        return disks(grid, rng or Rng(0))
    return Image(grid, np.ones(grid.shape))
