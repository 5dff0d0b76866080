"""Deformation fields: synthesis, convex constraint, composition, warping and derivatives.

Fields use the pull-back convention: ``U.p_x[j, k], U.p_y[j, k]`` is the
reference-configuration position of the particle found at pixel (j, k). Warping
an image samples the reference image bilinearly at those positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator

from .errors import DimensionError
from .models import (
    Axis,
    DeformationField,
    DeformationSequence,
    GridSpec,
    Image,
    MotionClass,
)
from .rng import STREAM_MOTION, Rng

logger = logging.getLogger(__name__)

CHORD_EPS = 1e-9            # px, rows of C with a shorter chord keep U_in unchanged
NODE_TOLERANCE = 1e-9       # px, support vectors may touch the edge of Ω
TRIG_ORDER = 3              # harmonics in the temporal trajectory model
_DENSE_TIMES = 257          # samples used to normalise trajectories to their bound


# Bilinear warping

def _cells(grid: GridSpec, p_x: np.ndarray, p_y: np.ndarray):
    row, col = grid.to_index(np.asarray(p_x, dtype=float), np.asarray(p_y, dtype=float))
    j0 = np.floor(row).astype(np.int64)
    k0 = np.floor(col).astype(np.int64)
    return j0, k0, row - j0, col - k0


def _corners(grid: GridSpec, p_x: np.ndarray, p_y: np.ndarray):
    """Flat indices, bilinear weights and in-grid flags of the four cell corners."""
    j0, k0, fy, fx = _cells(grid, p_x, p_y)
    n = grid.n
    for dj, dk, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        j, k = j0 + dj, k0 + dk
        inside = (j >= 0) & (j < n) & (k >= 0) & (k < n)
        yield np.where(inside, j * n + k, 0), np.where(inside, weight, 0.0), inside


def warp_matrix(U: DeformationField) -> sparse.csr_matrix:
    """Sparse N²×N² matrix W with apply(U, s) = W @ s (zero outside the grid)."""
    n2 = U.grid.n ** 2
    rows, cols, vals = [], [], []
    pixels = np.arange(n2)
    for index, weight, inside in _corners(U.grid, U.p_x.ravel(), U.p_y.ravel()):
        rows.append(pixels[inside])
        cols.append(index[inside])
        vals.append(weight[inside])
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n2, n2)
    )
    matrix.sum_duplicates()
    return matrix


def apply(U: DeformationField, s: Image) -> Image:
    if U.grid != s.grid:
        raise DimensionError(f"field grid {U.grid.n} and image grid {s.grid.n} differ")
    values = warp_matrix(U) @ s.values.ravel()
    return Image.clipped(s.grid, values.reshape(s.grid.shape))


def apply_values(U: DeformationField, values: np.ndarray) -> np.ndarray:
    """Warp an arbitrary (possibly complex or signed) array."""
    return (warp_matrix(U) @ values.ravel()).reshape(U.grid.shape)


def apply_adjoint(U: DeformationField, values: np.ndarray) -> np.ndarray:
    """Transpose scatter of :func:`apply_values`."""
    return (warp_matrix(U).T @ values.ravel()).reshape(U.grid.shape)


def dU_dp(U: DeformationField, s: Image, axis: Axis | str) -> np.ndarray:
    """Derivative of the warped value at each pixel w.r.t. that pixel's own target coordinate.

    The cell is chosen by floor(), so integer coordinates use the cell that
    starts at that node.
    """
    axis = Axis(axis)
    grid = U.grid
    j0, k0, fy, fx = _cells(grid, U.p_x, U.p_y)
    padded = np.pad(s.values, 1)

    def at(dj: int, dk: int) -> np.ndarray:
        j = np.clip(j0 + dj + 1, 0, grid.n + 1)
        k = np.clip(k0 + dk + 1, 0, grid.n + 1)
        return padded[j, k]

    s00, s01, s10, s11 = at(0, 0), at(0, 1), at(1, 0), at(1, 1)
    if axis is Axis.X:
        return (1 - fy) * (s01 - s00) + fy * (s11 - s10)
    return (1 - fx) * (s10 - s00) + fx * (s11 - s01)


def resample_values(values: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    """Bilinear resampling of (..., N, N) arrays between grids covering the same field of view.

    Positions past the outermost source pixel centers are linearly extrapolated.
    """
    if source == target:
        return np.array(values, dtype=float)
    ratio = source.n / target.n
    ty, tx = np.meshgrid(target.axis * ratio, target.axis * ratio, indexing="ij")
    points = np.stack([ty.ravel(), tx.ravel()], axis=1)
    values = np.asarray(values, dtype=float)
    lead = values.shape[:-2]
    flat = values.reshape((-1,) + source.shape)
    out = np.stack([
        RegularGridInterpolator((source.axis, source.axis), v, method="linear",
                                bounds_error=False, fill_value=None)(points)
        for v in flat
    ])
    return out.reshape(lead + target.shape)


def sample_clamped(grid: GridSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample with positions clamped to the pixel-center range."""
    row, col = grid.to_index(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    coords = np.stack([np.clip(row, 0, grid.n - 1), np.clip(col, 0, grid.n - 1)])
    return ndimage.map_coordinates(values, coords, order=1, mode="nearest")


# Global maps

def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def synth_affine(gamma: np.ndarray, offset: np.ndarray, grid: GridSpec) -> DeformationField:
    """p(x) = Γ x + b."""
    x, y = grid.coordinates()
    gamma = np.asarray(gamma, dtype=float)
    return DeformationField(
        grid,
        gamma[0, 0] * x + gamma[0, 1] * y + offset[0],
        gamma[1, 0] * x + gamma[1, 1] * y + offset[1],
    )


@dataclass(frozen=True)
class RigidMotion:
    """In-plane rotation (radians) and shift (px) of the object."""
    theta: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    @property
    def shift(self) -> np.ndarray:
        return np.array([self.shift_x, self.shift_y])

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta, self.shift_x, self.shift_y])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> RigidMotion:
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def field(self, grid: GridSpec) -> DeformationField:
        return synth_rigid(self.theta, self.shift, grid)

    def jacobian(self, grid: GridSpec) -> np.ndarray:
        """(3, 2, N, N) derivatives of (p_x, p_y) w.r.t. (theta, shift_x, shift_y)."""
        x, y = grid.coordinates()
        dx, dy = x - self.shift_x, y - self.shift_y
        c, s = np.cos(self.theta), np.sin(self.theta)
        ones = np.ones(grid.shape)
        return np.array([
            [-s * dx + c * dy, -c * dx - s * dy],
            [-c * ones, s * ones],
            [-s * ones, -c * ones],
        ])


def synth_rigid(theta: float, shift: Sequence[float], grid: GridSpec) -> DeformationField:
    """p(x) = R(-theta) (x - shift)."""
    gamma = rotation(-theta)
    shift = np.asarray(shift, dtype=float)
    return synth_affine(gamma, -gamma @ shift, grid)


def fit_rigid(U: DeformationField, mask: np.ndarray | None = None) -> RigidMotion:
    """Least-squares rigid motion reproducing U's targets on ``mask`` (Procrustes)."""
    x, y = U.grid.coordinates()
    keep = np.ones(U.grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ValueError("rigid fit needs at least one pixel in the mask")
    xs, ys = x[keep], y[keep]
    px, py = U.p_x[keep], U.p_y[keep]
    xc, yc, pxc, pyc = xs - xs.mean(), ys - ys.mean(), px - px.mean(), py - py.mean()
    phi = np.arctan2(np.sum(xc * pyc - yc * pxc), np.sum(xc * pxc + yc * pyc))
    offset = np.array([px.mean(), py.mean()]) - rotation(phi) @ np.array([xs.mean(), ys.mean()])
    shift = -rotation(-phi) @ offset
    return RigidMotion(float(-phi), float(shift[0]), float(shift[1]))


# Free-form deformations

@dataclass(frozen=True)
class FfdSpec:
    """Per-node affine maps on an M×M control grid spanning the field of view.

    ``gamma`` has shape (T, M, M, 2, 2) and ``offset`` (T, M, M, 2): one affine
    map per node and time sample. Node (l, m) sits at row l, column m.
    """
    m: int
    gamma: np.ndarray
    offset: np.ndarray
    order: int = 3

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError(f"control grid needs M >= 2, got {self.m}")
        if self.order not in (1, 3):
            raise ValueError(f"spline order must be 1 or 3, got {self.order}")
        if self.m <= self.order:
            raise ValueError(f"order {self.order} splines need M >= {self.order + 1}, got {self.m}")
        if self.gamma.shape[1:] != (self.m, self.m, 2, 2) or self.offset.shape[1:] != (self.m, self.m, 2):
            raise DimensionError("node parameters do not match the control grid")

    @classmethod
    def shared(cls, m: int, gamma: np.ndarray, offset: np.ndarray, order: int = 3) -> FfdSpec:
        g = np.broadcast_to(np.asarray(gamma, dtype=float), (1, m, m, 2, 2)).copy()
        b = np.broadcast_to(np.asarray(offset, dtype=float), (1, m, m, 2)).copy()
        return cls(m, g, b, order)

    @property
    def n_times(self) -> int:
        return self.gamma.shape[0]

    def nodes(self, grid: GridSpec) -> np.ndarray:
        return np.linspace(-grid.n / 2, grid.n / 2, self.m)

    def support_vectors(self, t: int, grid: GridSpec) -> np.ndarray:
        """(M, M, 2) node images v = Γ x + b at time sample t."""
        axis = self.nodes(grid)
        nx, ny = np.meshgrid(axis, axis, indexing="xy")
        positions = np.stack([nx, ny], axis=-1)
        return np.einsum("lmab,lmb->lma", self.gamma[t], positions) + self.offset[t]


def synth_ffd(spec: FfdSpec, t: int, grid: GridSpec) -> DeformationField:
    axis = spec.nodes(grid)
    support = spec.support_vectors(t, grid)
    if np.abs(support).max() > grid.n / 2 + NODE_TOLERANCE:
        raise ValueError(
            f"control node mapped to {np.abs(support).max():.3f} px, outside the field of view ±{grid.n / 2}"
        )
    nx, ny = np.meshgrid(axis, axis, indexing="xy")
    displacement = (support[..., 0] - nx, support[..., 1] - ny)
    d_x, d_y = (
        RectBivariateSpline(axis, axis, d, kx=spec.order, ky=spec.order, s=0)(grid.axis, grid.axis)
        for d in displacement
    )
    return DeformationField.from_displacement(grid, d_x, d_y)


# Convex region

@dataclass(frozen=True)
class ConvexRegion:
    """Axis-aligned ellipse with center (cx, cy) and semi-axes a (along x), b (along y)."""
    cx: float
    cy: float
    a: float
    b: float

    def __post_init__(self) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"ellipse semi-axes must be positive, got {self.a}, {self.b}")

    def level(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.sqrt(((x - self.cx) / self.a) ** 2 + ((y - self.cy) / self.b) ** 2)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.level(x, y) <= 1.0

    def chord(self, r2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(r1^b, r1^t) extreme abscissae of the horizontal chord at height r2."""
        half = self.a * np.sqrt(np.clip(1.0 - ((r2 - self.cy) / self.b) ** 2, 0.0, None))
        return self.cx - half, self.cx + half

    def normal(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = (x - self.cx) / self.a ** 2, (y - self.cy) / self.b ** 2
        norm = np.hypot(nx, ny)
        norm = np.where(norm > 0, norm, 1.0)
        return nx / norm, ny / norm

    def boundary(self, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.cx + self.a * np.cos(angles), self.cy + self.b * np.sin(angles)

    def clamp(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Radially pull positions outside the ellipse back onto its boundary."""
        scale = np.maximum(self.level(x, y), 1.0)
        return self.cx + (x - self.cx) / scale, self.cy + (y - self.cy) / scale

    @classmethod
    def centered(cls, grid: GridSpec, fraction_x: float, fraction_y: float) -> ConvexRegion:
        return cls(0.0, 0.0, fraction_x * grid.n, fraction_y * grid.n)


def _chord_end_flow(U_in: DeformationField, C: ConvexRegion, r1: np.ndarray, r2: np.ndarray,
                    normal_only: bool):
    """Samples of U_in at (r1, r2) minus the chord-end displacement, interpolated linearly in r1.

    With ``normal_only`` just the component along each end's boundary normal is
    taken. Rows with a chord shorter than CHORD_EPS keep U_in.
    """
    grid = U_in.grid
    r1, r2 = np.asarray(r1, dtype=float), np.asarray(r2, dtype=float)
    ux = sample_clamped(grid, U_in.p_x, r1, r2)
    uy = sample_clamped(grid, U_in.p_y, r1, r2)
    r1_b, r1_t = C.chord(r2)
    width = r1_t - r1_b
    valid = width >= CHORD_EPS
    safe = np.where(valid, width, 1.0)

    correction_x = np.zeros_like(r1)
    correction_y = np.zeros_like(r1)
    for end, weight in ((r1_t, (r1 - r1_b) / safe), (r1_b, (r1_t - r1) / safe)):
        weight = np.where(valid, weight, 0.0)
        dx = sample_clamped(grid, U_in.p_x, end, r2) - end
        dy = sample_clamped(grid, U_in.p_y, end, r2) - r2
        if normal_only:
            nx, ny = C.normal(end, r2)
            normal_part = nx * dx + ny * dy
            dx, dy = normal_part * nx, normal_part * ny
        correction_x += weight * dx
        correction_y += weight * dy
    return ux - correction_x, uy - correction_y


def remove_normal_flow(U_in: DeformationField, C: ConvexRegion, r1: np.ndarray, r2: np.ndarray):
    """Ū^in at points (r1, r2) of C before the radial clamp.

    The normal displacement found at the two chord ends of each row is removed
    along the respective boundary normal, interpolated linearly in r1.
    """
    return _chord_end_flow(U_in, C, r1, r2, normal_only=True)


def constrained_targets(U_in: DeformationField, C: ConvexRegion, r1: np.ndarray, r2: np.ndarray):
    """Targets of the constrained field at points (r1, r2) of C.

    The whole chord-end displacement is removed, normal and tangential parts
    alike, so points of ∂C keep their position. Targets are then clamped
    radially into C.
    """
    bar_x, bar_y = _chord_end_flow(U_in, C, r1, r2, normal_only=False)
    return C.clamp(bar_x, bar_y)


def constrain_convex(U_in: DeformationField, C: ConvexRegion) -> DeformationField:
    """Deformation confined to C: ∂C stays in place, targets stay in C, identity outside."""
    grid = U_in.grid
    x, y = grid.coordinates()
    inside = C.contains(x, y)
    p_x, p_y = x.copy(), y.copy()
    p_x[inside], p_y[inside] = constrained_targets(U_in, C, x[inside], y[inside])
    logger.debug("convex constraint: %d of %d pixels inside C", inside.sum(), inside.size)
    return DeformationField(grid, p_x, p_y)


def compose(U_out: DeformationField, U_in_bar: DeformationField) -> DeformationField:
    """U(x) = Ū^in(U^out(x)), targets outside the pixel-center range clamped to it."""
    if U_out.grid != U_in_bar.grid:
        raise DimensionError("composed fields must share one grid")
    grid = U_out.grid
    return DeformationField(
        grid,
        sample_clamped(grid, U_in_bar.p_x, U_out.p_x, U_out.p_y),
        sample_clamped(grid, U_in_bar.p_y, U_out.p_x, U_out.p_y),
    )


# Motion synthesis

@dataclass(frozen=True)
class MotionConfig:
    """Generative motion model; bounds are maximal absolute values over time."""
    motion_class: MotionClass = MotionClass.RIGID
    rotation_deg: float = 10.0
    shift_fraction: float = 0.03          # of N
    shear: float = 0.05                   # affine and free-form classes
    ffd_nodes: int = 6
    spline_order: int = 3
    spatial_sigma: float = 1.0            # node units
    region: tuple[float, float] = (0.3, 0.25)   # ellipse semi-axes as fractions of N
    inner_fraction: float = 0.02          # inner free-form amplitude for ffd+convex

    def __post_init__(self) -> None:
        object.__setattr__(self, "motion_class", MotionClass(self.motion_class))
        if not 0 <= self.rotation_deg <= 45:
            raise ValueError(f"rotation bound must lie in [0, 45] degrees, got {self.rotation_deg}")
        if not 0 <= self.shift_fraction < 0.5 or not 0 <= self.inner_fraction < 0.5:
            raise ValueError("shift bounds must lie in [0, 0.5) of the field of view")
        if not 0 <= self.shear < 0.5:
            raise ValueError(f"shear bound must lie in [0, 0.5), got {self.shear}")

    @property
    def uses_shear(self) -> bool:
        return self.motion_class in (MotionClass.AFFINE, MotionClass.FFD)

    @property
    def is_static(self) -> bool:
        inner = self.inner_fraction if self.motion_class is MotionClass.FFD_CONVEX else 0.0
        shear = self.shear if self.uses_shear else 0.0
        return self.rotation_deg == 0 and self.shift_fraction == 0 and shear == 0 and inner == 0


def excitation_times(n_exc: int) -> np.ndarray:
    """Normalised acquisition times τ_i = i / (N_exc - 1) in [0, 1]."""
    if n_exc < 1:
        raise ValueError(f"need at least one excitation, got {n_exc}")
    if n_exc == 1:
        return np.zeros(1)
    return np.arange(n_exc) / (n_exc - 1)


def _harmonics(times: np.ndarray) -> np.ndarray:
    """(2·TRIG_ORDER, T) basis sin(qπτ), 1 - cos(qπτ); every basis function is zero at τ = 0."""
    q = np.arange(1, TRIG_ORDER + 1)[:, None]
    phase = np.pi * q * np.asarray(times)[None, :]
    return np.concatenate([np.sin(phase), 1.0 - np.cos(phase)])


@dataclass
class _Trajectories:
    """Seeded smooth parameter trajectories, one per node and parameter."""
    coefficients: np.ndarray      # (n_params, 2·TRIG_ORDER, M, M)
    bounds: np.ndarray            # (n_params,)
    scale: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        dense = np.einsum("pclm,ct->ptlm", self.coefficients,
                          _harmonics(np.linspace(0.0, 1.0, _DENSE_TIMES)))
        peak = np.abs(dense).reshape(len(self.bounds), -1).max(axis=1)
        self.scale = np.where(peak > 0, self.bounds / np.where(peak > 0, peak, 1.0), 0.0)

    def at(self, times: np.ndarray) -> np.ndarray:
        """(n_params, T, M, M) parameter values at the requested times."""
        values = np.einsum("pclm,ct->ptlm", self.coefficients, _harmonics(times))
        return values * self.scale[:, None, None, None]

    @classmethod
    def draw(cls, gen: np.random.Generator, bounds: Sequence[float], m: int, sigma: float) -> _Trajectories:
        bounds = np.asarray(bounds, dtype=float)
        decay = 1.0 / np.tile(np.arange(1, TRIG_ORDER + 1), 2)
        coefficients = gen.standard_normal((len(bounds), 2 * TRIG_ORDER, m, m)) * decay[None, :, None, None]
        if m > 1 and sigma > 0:
            coefficients = ndimage.gaussian_filter(coefficients, (0, 0, sigma, sigma), mode="nearest")
        return cls(coefficients, bounds)


def _pin_edges(params: np.ndarray) -> np.ndarray:
    """Zero the parameters of the outermost control-node ring so nodes on the edge of Ω stay put."""
    pinned = params.copy()
    pinned[..., 0, :] = pinned[..., -1, :] = 0.0
    pinned[..., :, 0] = pinned[..., :, -1] = 0.0
    return pinned


def _node_maps(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Γ = R(-θ)·[[1, γ], [0, 1]] and b = -Γ t from (θ, γ, t_x, t_y) node parameters."""
    theta, shear, tx, ty = params
    c, s = np.cos(theta), np.sin(theta)
    gamma = np.empty(theta.shape + (2, 2))
    gamma[..., 0, 0] = c
    gamma[..., 0, 1] = c * shear + s
    gamma[..., 1, 0] = -s
    gamma[..., 1, 1] = -s * shear + c
    offset = -np.einsum("...ab,...b->...a", gamma, np.stack([tx, ty], axis=-1))
    return gamma, offset


def synth_motion(config: MotionConfig, rng: Rng, times: np.ndarray, grid: GridSpec) -> list[DeformationField]:
    """Deformation states at arbitrary normalised times τ ∈ [0, 1] (τ = 0 is the reference)."""
    times = np.asarray(times, dtype=float)
    gen = rng.generator(STREAM_MOTION)
    rot = np.deg2rad(config.rotation_deg)
    shift = config.shift_fraction * grid.n
    cls = config.motion_class
    shear = config.shear if config.uses_shear else 0.0
    m = config.ffd_nodes if cls is MotionClass.FFD else 1

    outer = _Trajectories.draw(gen, (rot, shear, shift, shift), m, config.spatial_sigma).at(times)
    if cls is MotionClass.FFD:
        outer = _pin_edges(outer)
    gamma, offset = _node_maps(outer)          # (T, M, M, 2, 2), (T, M, M, 2)
    spec = FfdSpec(m, gamma, offset, order=config.spline_order) if cls is MotionClass.FFD else None

    inner_spec = region = None
    if cls is MotionClass.FFD_CONVEX:
        # Inner motion: small free-form flow confined to the ellipse; outer motion: rigid body.
        inner = _Trajectories.draw(
            gen, (0.0, 0.0, config.inner_fraction * grid.n, config.inner_fraction * grid.n),
            config.ffd_nodes, config.spatial_sigma,
        ).at(times)
        inner_spec = FfdSpec(config.ffd_nodes, *_node_maps(_pin_edges(inner)), order=config.spline_order)
        region = ConvexRegion.centered(grid, *config.region)

    fields = []
    for t, tau in enumerate(times):
        if tau == 0:
            fields.append(DeformationField.identity(grid))
        elif spec is not None:
            fields.append(synth_ffd(spec, t, grid))
        elif inner_spec is None:
            fields.append(synth_affine(gamma[t, 0, 0], offset[t, 0, 0], grid))
        else:
            u_out = synth_affine(gamma[t, 0, 0], offset[t, 0, 0], grid)
            u_in = constrain_convex(synth_ffd(inner_spec, t, grid), region)
            fields.append(compose(u_out, u_in))
    logger.debug("synthesised %d %s deformation states", len(fields), cls.value)
    return fields


def synth_sequence(config: MotionConfig, rng: Rng, n_exc: int, grid: GridSpec) -> DeformationSequence:
    return DeformationSequence(tuple(synth_motion(config, rng, excitation_times(n_exc), grid)))
