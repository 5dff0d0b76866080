"""Centered Fourier transforms and Kaiser-Bessel gridding.

Frequencies are in cycles per field of view. On the centered N-grid,
frequency κ lives at index κ + N/2; pixel N/2 is the transform origin.
The gridding operator works on a 2× oversampled grid of size G = 2N, where
frequency κ sits at index G/2 + 2κ.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import fft, sparse, special

from .errors import DimensionError
from .models import GridSpec

logger = logging.getLogger(__name__)

OVERSAMPLING = 2
KERNEL_WIDTH = 4


class Direction(Enum):
    FORWARD = "forward"   # image -> samples
    ADJOINT = "adjoint"   # samples -> image


def fft2c(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT with DC at the center, over the last two axes."""
    axes = (-2, -1)
    return fft.fftshift(fft.fft2(fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return fft.fftshift(fft.ifft2(fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


def kaiser_bessel_beta(width: int = KERNEL_WIDTH, alpha: float = OVERSAMPLING) -> float:
    return float(np.pi * np.sqrt((width / alpha) ** 2 * (alpha - 0.5) ** 2 - 0.8))


def kaiser_bessel(distance: np.ndarray, width: int = KERNEL_WIDTH, beta: float | None = None) -> np.ndarray:
    """KB window on |distance| < width/2 (oversampled-grid units), zero elsewhere."""
    beta = kaiser_bessel_beta(width) if beta is None else beta
    ratio = 2.0 * np.asarray(distance, dtype=float) / width
    inside = np.abs(ratio) < 1.0
    arg = beta * np.sqrt(np.clip(1.0 - ratio ** 2, 0.0, None))
    return np.where(inside, special.i0(arg) / special.i0(beta), 0.0)


def _axis_weights(u: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices (M, width) and partition-of-unity weights along one axis."""
    base = np.floor(u).astype(np.int64) - width // 2 + 1
    index = base[:, None] + np.arange(width)[None, :]
    weights = kaiser_bessel(u[:, None] - index, width)
    return index, weights / weights.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Gridder:
    """Sparse interpolation from the oversampled Cartesian grid to ``coords``."""
    coords: np.ndarray      # (M, 2) sample positions (k_x, k_y)
    n: int

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        radius = np.hypot(coords[:, 0], coords[:, 1])
        if coords.size and radius.max() > self.n / 2 + 1e-9:
            raise DimensionError(
                f"trajectory reaches |k| = {radius.max():.3f}, beyond the grid radius {self.n / 2}"
            )
        object.__setattr__(self, "coords", coords)

    @property
    def g(self) -> int:
        return OVERSAMPLING * self.n

    @property
    def n_samples(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        g = self.g
        u = g / 2 + OVERSAMPLING * self.coords
        ix, wx = _axis_weights(u[:, 0], KERNEL_WIDTH)
        iy, wy = _axis_weights(u[:, 1], KERNEL_WIDTH)
        rows = np.repeat(np.arange(self.n_samples), KERNEL_WIDTH ** 2)
        cols = ((iy[:, :, None] % g) * g + (ix[:, None, :] % g)).reshape(-1)
        vals = (wy[:, :, None] * wx[:, None, :]).reshape(-1)
        matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_samples, g * g))
        matrix.sum_duplicates()
        logger.debug("gridding matrix: %d samples, %d nonzeros", self.n_samples, matrix.nnz)
        return matrix

    @cached_property
    def apodization(self) -> np.ndarray:
        """Image-space response of the normalised kernel at on-grid offsets."""
        c0 = float(kaiser_bessel(0.0))
        c1 = float(kaiser_bessel(1.0))
        t = np.arange(self.n) - self.n // 2
        profile = (c0 + 2 * c1 * np.cos(2 * np.pi * t / self.g)) / (c0 + 2 * c1)
        return np.outer(profile, profile)

    def spread(self, samples: np.ndarray) -> np.ndarray:
        """Adjoint interpolation onto the oversampled grid (G, G)."""
        return (self.matrix.T @ samples).reshape(self.g, self.g)

    def interpolate(self, kgrid: np.ndarray) -> np.ndarray:
        return self.matrix @ kgrid.reshape(-1)

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Type-2 NUFFT: (N, N) image -> (M,) samples, orthonormal scaling."""
        if image.shape != (self.n, self.n):
            raise DimensionError(f"image {image.shape} does not match grid {self.n}")
        pad = (self.g - self.n) // 2
        padded = np.zeros((self.g, self.g), dtype=np.complex128)
        padded[pad:pad + self.n, pad:pad + self.n] = image / self.apodization
        kgrid = fft.fftshift(fft.fft2(fft.ifftshift(padded)))
        return self.interpolate(kgrid) / self.n

    def adjoint(self, samples: np.ndarray) -> np.ndarray:
        """Type-1 NUFFT: (M,) samples -> (N, N) image, exact adjoint of :meth:`forward`."""
        samples = np.asarray(samples, dtype=np.complex128)
        if samples.shape != (self.n_samples,):
            raise DimensionError(f"expected {self.n_samples} samples, got {samples.shape}")
        kgrid = self.spread(samples)
        padded = fft.fftshift(fft.ifft2(fft.ifftshift(kgrid), norm="forward"))
        pad = (self.g - self.n) // 2
        return padded[pad:pad + self.n, pad:pad + self.n] / self.apodization / self.n


def nufft(direction: Direction | str, values: np.ndarray, coords: np.ndarray, grid: GridSpec) -> np.ndarray:
    gridder = Gridder(coords, grid.n)
    if Direction(direction) is Direction.FORWARD:
        return gridder.forward(values)
    return gridder.adjoint(values)
