"""Data models shared across senseflow: grids, images, fields, sampling and data."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionError


class PhantomKind(Enum):
    SHEPP_LOGAN = "shepp_logan"
    DISKS = "disks"
    CONSTANT = "constant"


class MotionClass(Enum):
    RIGID = "rigid"
    AFFINE = "affine"
    FFD = "ffd"
    FFD_CONVEX = "ffd+convex"


class MotionTiming(Enum):
    EXCITATION = "excitation"   # One deformation state per excitation
    SPOKE = "spoke"             # Every spoke sees its own state (continuous GRE)


class OperatorPath(Enum):
    DFFT = "dfft"     # Nearest-grid samples on the centered Cartesian grid
    NUFFT = "nufft"   # Kaiser-Bessel gridding at the trajectory samples


class Axis(Enum):
    X = "x"
    Y = "y"


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class GridSpec:
    """Square N×N pixel grid on the field of view [-N/2, N/2]²."""
    n: int

    def __post_init__(self) -> None:
        if self.n < 8 or self.n % 2:
            raise ValueError(f"grid size must be even and >= 8, got {self.n}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def axis(self) -> np.ndarray:
        """Pixel-center coordinates along one axis."""
        return np.arange(self.n) + 0.5 - self.n / 2

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) arrays with x varying along columns and y along rows."""
        return np.meshgrid(self.axis, self.axis, indexing="xy")

    def to_position(self, j: int | np.ndarray, k: int | np.ndarray):
        return (k + 0.5 - self.n / 2, j + 0.5 - self.n / 2)

    def to_index(self, x: float | np.ndarray, y: float | np.ndarray):
        """Fractional (row, col) of a position; integral at pixel centers."""
        return (y - 0.5 + self.n / 2, x - 0.5 + self.n / 2)

    def coarsen(self, h: int) -> GridSpec:
        if self.n % (2 ** h):
            raise ValueError(f"grid size {self.n} is not divisible by 2**{h}")
        return GridSpec(self.n // 2 ** h)


def _check_shape(grid: GridSpec, values: np.ndarray, what: str) -> None:
    if values.shape != grid.shape:
        raise DimensionError(f"{what} has shape {values.shape}, grid is {grid.shape}")


@dataclass(frozen=True)
class Image:
    """Real nonnegative image at the reference configuration."""
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        _check_shape(self.grid, values, "image")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite values")
        if values.min() < 0:
            raise ValueError(f"image must be nonnegative, min is {values.min():g}")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: GridSpec) -> Image:
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def clipped(cls, grid: GridSpec, values: np.ndarray) -> Image:
        """Build an image from arbitrary real values by clamping negatives."""
        return cls(grid, np.maximum(np.real(values), 0.0))


@dataclass(frozen=True)
class ComplexField:
    """Complex N×N array on the grid (k-space grids, coil-weighted images)."""
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.complex128)
        _check_shape(self.grid, values, "complex field")
        if not np.all(np.isfinite(values)):
            raise ValueError("complex field contains non-finite values")
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True)
class DeformationField:
    """Pull-back field: pixel (j, k) maps to reference position (p_x, p_y)."""
    grid: GridSpec
    p_x: np.ndarray
    p_y: np.ndarray

    def __post_init__(self) -> None:
        p_x = np.array(self.p_x, dtype=np.float64)
        p_y = np.array(self.p_y, dtype=np.float64)
        _check_shape(self.grid, p_x, "p_x")
        _check_shape(self.grid, p_y, "p_y")
        if not (np.all(np.isfinite(p_x)) and np.all(np.isfinite(p_y))):
            raise ValueError("deformation field contains non-finite coordinates")
        object.__setattr__(self, "p_x", _frozen(p_x))
        object.__setattr__(self, "p_y", _frozen(p_y))

    @classmethod
    def identity(cls, grid: GridSpec) -> DeformationField:
        x, y = grid.coordinates()
        return cls(grid, x, y)

    @classmethod
    def from_displacement(cls, grid: GridSpec, d_x: np.ndarray, d_y: np.ndarray) -> DeformationField:
        x, y = grid.coordinates()
        return cls(grid, x + d_x, y + d_y)

    @classmethod
    def from_stack(cls, grid: GridSpec, stacked: np.ndarray) -> DeformationField:
        return cls(grid, stacked[0], stacked[1])

    @property
    def displacement(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.grid.coordinates()
        return self.p_x - x, self.p_y - y

    def stack(self) -> np.ndarray:
        return np.stack([self.p_x, self.p_y])

    def component(self, axis: Axis) -> np.ndarray:
        return self.p_x if axis is Axis.X else self.p_y

    def max_deviation(self, other: DeformationField) -> float:
        return float(max(np.abs(self.p_x - other.p_x).max(), np.abs(self.p_y - other.p_y).max()))


IDENTITY_TOLERANCE = 1e-6  # px, for the pinned reference excitation


@dataclass(frozen=True)
class DeformationSequence:
    """Per-excitation fields; fields[0] is the reference configuration."""
    fields: tuple[DeformationField, ...]

    def __post_init__(self) -> None:
        fields = tuple(self.fields)
        if not fields:
            raise ValueError("deformation sequence needs at least one field")
        grid = fields[0].grid
        if any(f.grid != grid for f in fields):
            raise DimensionError("all fields of a sequence must share one grid")
        if fields[0].max_deviation(DeformationField.identity(grid)) > IDENTITY_TOLERANCE:
            raise ValueError("the first field of a sequence must be the identity")
        object.__setattr__(self, "fields", fields)

    @classmethod
    def identity(cls, grid: GridSpec, n_exc: int) -> DeformationSequence:
        ident = DeformationField.identity(grid)
        return cls(tuple(ident for _ in range(n_exc)))

    @classmethod
    def from_stack(cls, grid: GridSpec, stacked: np.ndarray) -> DeformationSequence:
        return cls(tuple(DeformationField.from_stack(grid, s) for s in stacked))

    @property
    def grid(self) -> GridSpec:
        return self.fields[0].grid

    @property
    def n_exc(self) -> int:
        return len(self.fields)

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, i: int) -> DeformationField:
        return self.fields[i]

    def __iter__(self):
        return iter(self.fields)

    def stack(self) -> np.ndarray:
        return np.stack([f.stack() for f in self.fields])

    def replace(self, i: int, new: DeformationField) -> DeformationSequence:
        fields = list(self.fields)
        fields[i] = new
        return DeformationSequence(tuple(fields))


@dataclass(frozen=True)
class Trajectory:
    """Radial spokes through the k-space origin, in cycles per field of view."""
    n: int                # Grid size the trajectory was built for
    n_readout: int
    angles: np.ndarray    # Radians in [0, pi), spoke j at angles[j]
    order: np.ndarray     # Acquisition step -> spoke index

    def __post_init__(self) -> None:
        angles = np.asarray(self.angles, dtype=np.float64)
        order = np.asarray(self.order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(len(angles))):
            raise ValueError("acquisition order must be a permutation of the spokes")
        object.__setattr__(self, "angles", _frozen(angles))
        object.__setattr__(self, "order", _frozen(order))

    @property
    def n_spokes(self) -> int:
        return len(self.angles)

    @property
    def radii(self) -> np.ndarray:
        """Signed readout positions; sample n_readout // 2 is the origin."""
        return (np.arange(self.n_readout) - self.n_readout // 2) * (self.n / self.n_readout)

    @property
    def coords(self) -> np.ndarray:
        """(n_spokes, n_readout, 2) array of (k_x, k_y)."""
        direction = np.stack([np.cos(self.angles), np.sin(self.angles)], axis=-1)
        return self.radii[None, :, None] * direction[:, None, :]

    def spoke_coords(self, spokes: np.ndarray) -> np.ndarray:
        """Flattened (len(spokes) * n_readout, 2) sample coordinates."""
        return self.coords[np.asarray(spokes)].reshape(-1, 2)


@dataclass(frozen=True)
class ExcitationMasks:
    """Per-excitation spoke blocks and their nearest-grid k-space selectors."""
    spokes: tuple[np.ndarray, ...]
    masks: np.ndarray     # (n_exc, N, N) bool on the centered grid

    @property
    def n_exc(self) -> int:
        return len(self.spokes)

    @property
    def counts(self) -> np.ndarray:
        """Sampled grid points M_i per excitation."""
        return self.masks.reshape(self.n_exc, -1).sum(axis=1)

    @property
    def union(self) -> np.ndarray:
        return self.masks.any(axis=0)


@dataclass(frozen=True)
class CoilMaps:
    """Complex receive sensitivities S_c with their synthesis metadata."""
    grid: GridSpec
    maps: np.ndarray                       # (n_coils, N, N) complex
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        maps = np.array(self.maps, dtype=np.complex128)
        if maps.ndim != 3 or maps.shape[1:] != self.grid.shape:
            raise DimensionError(f"coil maps have shape {maps.shape}, grid is {self.grid.shape}")
        object.__setattr__(self, "maps", _frozen(maps))

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


@dataclass(frozen=True)
class KSpaceData:
    """Measured samples y_i^c for every excitation and coil.

    DFFT path: values (n_exc, n_coils, N, N), zero outside ``sampled``.
    NUFFT path: values (n_exc, n_coils, M) at the trajectory samples.
    """
    values: np.ndarray
    sampled: np.ndarray
    path: OperatorPath
    noise_level: float = 0.0
    noise_power: float = 0.0   # Realized squared norm of the added noise

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.complex128)
        sampled = np.asarray(self.sampled, dtype=bool)
        try:
            np.broadcast_shapes(values.shape, sampled.shape)
        except ValueError as exc:
            raise DimensionError(f"data {values.shape} and support {sampled.shape} disagree") from exc
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "sampled", _frozen(sampled.copy()))

    @property
    def n_exc(self) -> int:
        return self.values.shape[0]

    @property
    def n_coils(self) -> int:
        return self.values.shape[1]

    @property
    def sample_count(self) -> int:
        """Number of measured complex values across excitations and coils."""
        return int(np.broadcast_to(self.sampled, self.values.shape).sum())

    def with_values(self, values: np.ndarray, **changes) -> KSpaceData:
        return KSpaceData(values, self.sampled, self.path,
                          changes.get("noise_level", self.noise_level),
                          changes.get("noise_power", self.noise_power))

    def squared_norm(self) -> float:
        return float(np.vdot(self.values, self.values).real)
