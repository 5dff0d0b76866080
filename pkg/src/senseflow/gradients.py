"""Derivatives of the data fidelity with respect to the deformation parameters.

Each pixel's target coordinate only influences that pixel's warped value, so
the gradient and the Hessian diagonal are pointwise products of the image
derivative ``dU_dp`` with back-projected residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .deform import dU_dp
from .errors import DimensionError
from .forward import MotionOperator, MotionProblem, as_fields, residual_blocks, residuum
from .models import Axis, DeformationField, DeformationSequence, Image

logger = logging.getLogger(__name__)

FLOOR_FRACTION = 0.05
FLOOR_MIN = 1e-30


@dataclass(frozen=True)
class GradientField:
    """∂J/∂p^x and ∂J/∂p^y, each (n_exc, N, N)."""
    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self) -> None:
        if self.gx.shape != self.gy.shape:
            raise DimensionError(f"gradient components {self.gx.shape} and {self.gy.shape} differ")

    @property
    def n_exc(self) -> int:
        return self.gx.shape[0]

    def component(self, axis: Axis) -> np.ndarray:
        return self.gx if axis is Axis.X else self.gy

    def pinned(self) -> GradientField:
        """Copy with the reference excitation's block zeroed."""
        gx, gy = self.gx.copy(), self.gy.copy()
        gx[0] = 0.0
        gy[0] = 0.0
        return GradientField(gx, gy)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.gx ** 2) + np.sum(self.gy ** 2)))


@dataclass(frozen=True)
class HessianInfo:
    kappa: np.ndarray       # (n_exc,)
    diag_x: np.ndarray      # (n_exc, N, N) raw diagonal
    diag_y: np.ndarray
    hbar_x: np.ndarray      # floored diagonal
    hbar_y: np.ndarray


def _residual_images(op: MotionOperator, s: np.ndarray, y: np.ndarray, i: int) -> np.ndarray:
    w = op.encode(i, op.coil_images(i, s)) - y[i]
    return op.backproject(i, w)


def grad_U(problem: MotionProblem, U: DeformationSequence, s: Image) -> GradientField:
    fields = as_fields(U)
    y = problem.require_data().values
    op = MotionOperator(problem, fields)
    gx = np.empty((problem.n_exc,) + problem.grid.shape)
    gy = np.empty_like(gx)
    for i, field in enumerate(fields):
        back = _residual_images(op, s.values, y, i).real
        gx[i] = 2.0 * dU_dp(field, s, Axis.X) * back
        gy[i] = 2.0 * dU_dp(field, s, Axis.Y) * back
    return GradientField(gx, gy)


def floor_diagonal(diag: np.ndarray) -> np.ndarray:
    """H̄ = diag + max(0.05 · max(diag), FLOOR_MIN), per excitation."""
    peak = diag.reshape(diag.shape[0], -1).max(axis=1)
    floor = np.maximum(FLOOR_FRACTION * peak, FLOOR_MIN)
    return diag + floor[:, None, None]


def hessian_diag(problem: MotionProblem, U: DeformationSequence, s: Image) -> HessianInfo:
    fields = as_fields(U)
    if len(fields) != problem.n_exc:
        raise DimensionError(f"{len(fields)} fields for {problem.n_exc} excitations")
    kappa = problem.kappa
    coil_power = np.sum(np.abs(problem.coils.maps) ** 2, axis=0)
    diag_x = np.empty((problem.n_exc,) + problem.grid.shape)
    diag_y = np.empty_like(diag_x)
    for i, field in enumerate(fields):
        scale = 2.0 * coil_power * kappa[i]
        diag_x[i] = scale * dU_dp(field, s, Axis.X) ** 2
        diag_y[i] = scale * dU_dp(field, s, Axis.Y) ** 2
    return HessianInfo(kappa, diag_x, diag_y, floor_diagonal(diag_x), floor_diagonal(diag_y))


def precondition(g: GradientField, H: HessianInfo) -> GradientField:
    if g.gx.shape != H.hbar_x.shape:
        raise DimensionError(f"gradient {g.gx.shape} and Hessian {H.hbar_x.shape} differ")
    return GradientField(g.gx / H.hbar_x, g.gy / H.hbar_y)


def excitation_objectives(problem: MotionProblem, U, s: Image) -> np.ndarray:
    """J_i per excitation, summed over coils."""
    R, _ = residuum(U, s, problem)
    return residual_blocks(R).sum(axis=1)


def _perturbed(fields, i: int, j: int, k: int, axis: Axis, delta: float) -> list[DeformationField]:
    field = fields[i]
    p_x, p_y = field.p_x.copy(), field.p_y.copy()
    (p_x if axis is Axis.X else p_y)[j, k] += delta
    out = list(fields)
    out[i] = DeformationField(field.grid, p_x, p_y)
    return out


def fd_check(problem: MotionProblem, U: DeformationSequence, s: Image, pixel: tuple[int, int],
             axis: Axis | str, h: float = 1e-3, excitation: int | None = None) -> float:
    """Relative error between the analytic gradient and a central difference of J."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    axis = Axis(axis)
    fields = as_fields(U)
    i = problem.n_exc - 1 if excitation is None else excitation
    j, k = pixel
    if not (0 <= j < problem.grid.n and 0 <= k < problem.grid.n):
        raise IndexError(f"pixel {pixel} outside the {problem.grid.n}x{problem.grid.n} grid")
    analytic = float(grad_U(problem, fields, s).component(axis)[i, j, k])
    plus = residuum(_perturbed(fields, i, j, k, axis, h), s, problem)[1]
    minus = residuum(_perturbed(fields, i, j, k, axis, -h), s, problem)[1]
    central = (plus - minus) / (2.0 * h)
    error = abs(analytic - central) / max(abs(analytic), abs(central), 1e-12)
    logger.debug("fd_check exc %d pixel %s %s: analytic %.6g central %.6g error %.3g",
                 i, pixel, axis.value, analytic, central, error)
    return error
