"""Multilevel motion correction and the rigid Gauss-Newton baseline.

Levels run from the coarsest h = L down to the full grid h = 0. Each round
reconstructs s by CG, takes a Hessian-preconditioned gradient step on every
excitation's parameter field, and projects the result onto smooth
deformations. A step is kept only if it lowers that excitation's residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .deform import RigidMotion, dU_dp, fit_rigid, resample_values
from .errors import DimensionError, NumericalError
from .forward import MotionOperator, MotionProblem
from .gradients import grad_U, hessian_diag, precondition
from .models import (
    Axis,
    DeformationField,
    DeformationSequence,
    ExcitationMasks,
    GridSpec,
    Image,
    KSpaceData,
    OperatorPath,
)
from .nufft import Gridder
from .recon import ReconConfig, cg_sense_motion

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrectionConfig:
    levels: int = 2              # coarsest level L
    n_iter: int = 2              # rounds per level
    n_cg: int = 10               # CG iterations per round
    halvings: int = 5            # step backtracking budget
    spacing: float = 8.0         # projector control spacing at h = 0, px
    steps: int = 3               # preconditioned steps per round with s held fixed

    def __post_init__(self) -> None:
        if self.levels < 0:
            raise ValueError(f"levels must be >= 0, got {self.levels}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.halvings < 0:
            raise ValueError(f"halvings must be >= 0, got {self.halvings}")


# Resolution changes

def crop_kspace(problem: MotionProblem, h: int) -> MotionProblem:
    """Problem at resolution N / 2^h from the central Fourier coefficients."""
    if h == 0:
        return problem
    grid = problem.grid.coarsen(h)
    n, big = grid.n, problem.grid.n
    scale = 2.0 ** -h
    factor = big // n
    maps = problem.coils.maps.reshape(problem.n_coils, n, factor, n, factor).mean(axis=(2, 4))
    coils = type(problem.coils)(grid, maps, problem.coils.centers, problem.coils.widths)

    lo = big // 2 - n // 2
    window = (slice(None), slice(None), slice(lo, lo + n), slice(lo, lo + n))
    masks = ExcitationMasks(problem.masks.spokes, problem.masks.masks[:, lo:lo + n, lo:lo + n])

    if problem.path is OperatorPath.DFFT:
        data = None
        if problem.data is not None:
            y = problem.data
            data = KSpaceData(y.values[window] * scale, masks.masks[:, None], y.path, y.noise_level)
        return MotionProblem(grid, problem.trajectory, masks, coils, problem.path, data)

    radius = np.hypot(problem.gridders[0].coords[:, 0], problem.gridders[0].coords[:, 1])
    keep = radius < n / 2
    if not all(np.array_equal(np.hypot(g.coords[:, 0], g.coords[:, 1]) < n / 2, keep)
               for g in problem.gridders):
        raise DimensionError("excitations do not share one readout radius layout")
    gridders = tuple(Gridder(g.coords[keep], n) for g in problem.gridders)
    dcf = tuple(w[keep] for w in problem.dcf)
    data = None
    if problem.data is not None:
        y = problem.data
        values = y.values[:, :, keep] * scale
        data = KSpaceData(values, np.ones((problem.n_exc, 1, int(keep.sum())), dtype=bool),
                          y.path, y.noise_level)
    return MotionProblem(grid, problem.trajectory, masks, coils, problem.path, data, gridders, dcf)


def resample_field(obj, target: GridSpec):
    """Bilinear resampling of an Image, DeformationField or DeformationSequence to ``target``.

    Target coordinates are rescaled by the grid ratio so the physical map is preserved.
    """
    if isinstance(obj, DeformationSequence):
        return DeformationSequence(tuple(resample_field(f, target) for f in obj))
    if isinstance(obj, DeformationField):
        ratio = obj.grid.n / target.n
        stacked = resample_values(obj.stack(), obj.grid, target) / ratio
        return DeformationField.from_stack(target, stacked)
    if isinstance(obj, Image):
        return Image.clipped(target, resample_values(obj.values, obj.grid, target))
    raise TypeError(f"cannot resample {type(obj).__name__}")


# Projectors

class Projector(Protocol):
    def __call__(self, displacement: np.ndarray, h: int) -> np.ndarray:
        """Project (..., 2, n, n) displacement fields at level h."""


def spline_projection_matrix(n: int, spacing: float) -> np.ndarray:
    """Orthogonal projector onto cubic B-splines with knot ``spacing`` along one axis."""
    axis = np.arange(n) + 0.5 - n / 2
    if spacing <= 1.0:
        return np.eye(n)
    count = int(np.ceil(n / (2 * spacing))) + 3
    knots = spacing * np.arange(-count, count + 1, dtype=float)
    basis = BSpline.design_matrix(axis, knots, 3).toarray()
    q = linalg.orth(basis)
    return q @ q.T


def smooth_projector(displacement: np.ndarray, h: int, spacing: float) -> np.ndarray:
    """Least-squares fit onto a separable cubic B-spline control grid (a linear projection)."""
    if spacing < 0:
        raise ValueError(f"projector spacing must be nonnegative, got {spacing}")
    n = displacement.shape[-1]
    p = spline_projection_matrix(n, spacing)
    return np.einsum("ij,...jk,lk->...il", p, displacement, p)


@dataclass(frozen=True)
class SplineProjector:
    spacing: float = 8.0

    def __call__(self, displacement: np.ndarray, h: int) -> np.ndarray:
        return smooth_projector(displacement, h, self.spacing / 2 ** h)


class IdentityProjector:
    def __call__(self, displacement: np.ndarray, h: int) -> np.ndarray:
        return displacement


# Multilevel correction

@dataclass
class CorrectionStep:
    level: int
    round: int
    objective_cg: float       # J after the CG update of s
    objective_step: float     # J after the deformation step
    accepted: int             # steps kept, summed over excitations


@dataclass
class CorrectionResult:
    U: DeformationSequence
    s: Image
    history: list[CorrectionStep] = field(default_factory=list)


def excitation_objective(problem: MotionProblem, U_i: DeformationField, s: Image, i: int) -> float:
    """J_i = Σ_c ‖A_i F[S_c U_i(s)] - y_i^c‖²."""
    sub = problem.excitation(i)
    op = MotionOperator(sub, [U_i])
    r = op.forward(s.values) - sub.require_data().values
    return float(np.vdot(r, r).real)


def _objective(problem: MotionProblem, fields: Sequence[DeformationField], s: Image) -> float:
    op = MotionOperator(problem, fields)
    r = op.forward(s.values) - problem.require_data().values
    value = float(np.vdot(r, r).real)
    if not np.isfinite(value):
        raise NumericalError("data fidelity became non-finite during correction")
    return value


def _round(problem: MotionProblem, fields: list[DeformationField], s: Image, h: int,
           cfg: CorrectionConfig, projector: Projector) -> tuple[list[DeformationField], int]:
    """Up to ``cfg.steps`` preconditioned steps per excitation i >= 1, each backtracked on J_i.

    The gradient and Hessian diagonal are recomputed before every step; s stays fixed.
    Returns the fields and the number of steps kept over all excitations.
    """
    grid = problem.grid
    accepted = 0
    for sweep in range(cfg.steps):
        step = precondition(grad_U(problem, fields, s), hessian_diag(problem, fields, s)).pinned()
        kept = 0
        for i in range(1, problem.n_exc):
            current = fields[i]
            direction = np.stack([step.gx[i], step.gy[i]])
            if not np.any(direction):
                continue
            baseline = excitation_objective(problem, current, s, i)
            displacement = np.stack(current.displacement)
            t = 1.0
            for _ in range(cfg.halvings + 1):
                proposal = projector(displacement - t * direction, h)
                trial = DeformationField.from_displacement(grid, proposal[0], proposal[1])
                value = excitation_objective(problem, trial, s, i)
                if value < baseline:
                    fields[i] = trial
                    kept += 1
                    logger.debug("level %d sweep %d exc %d: step %.3g accepted, J_i %.6g -> %.6g",
                                 h, sweep, i, t, baseline, value)
                    break
                t /= 2.0
            else:
                logger.debug("level %d sweep %d exc %d: no decrease after %d halvings, skipped",
                             h, sweep, i, cfg.halvings)
        accepted += kept
        if not kept:
            break
    return fields, accepted


def correct_motion(problem: MotionProblem, U_est: DeformationSequence, cfg: CorrectionConfig | None = None,
                   projector: Projector | None = None) -> CorrectionResult:
    cfg = cfg or CorrectionConfig()
    projector = projector or SplineProjector(cfg.spacing)
    if U_est.grid != problem.grid:
        raise DimensionError("the initial estimate must live on the full problem grid")
    recon_cfg = ReconConfig(n_cg=cfg.n_cg)
    coarsest = cfg.levels
    level_problem = crop_kspace(problem, coarsest)
    U = resample_field(U_est, level_problem.grid)
    s = Image.zeros(level_problem.grid)
    history: list[CorrectionStep] = []

    for h in range(coarsest, -1, -1):
        if h != coarsest:
            level_problem = crop_kspace(problem, h)
            U = resample_field(U, level_problem.grid)
            s = resample_field(s, level_problem.grid)
        fields = list(U.fields)
        for k in range(cfg.n_iter):
            s = cg_sense_motion(level_problem, fields, s, recon_cfg).s
            j_cg = _objective(level_problem, fields, s)
            fields, accepted = _round(level_problem, fields, s, h, cfg, projector)
            j_step = _objective(level_problem, fields, s)
            history.append(CorrectionStep(h, k, j_cg, j_step, accepted))
            logger.info("correction level %d round %d: J %.6g -> %.6g (%d steps kept)",
                        h, k, j_cg, j_step, accepted)
        U = DeformationSequence(tuple(fields))

    s = cg_sense_motion(problem, U, s, recon_cfg).s
    return CorrectionResult(U, s, history)


# Rigid baseline

class RigidStatus(Enum):
    REFERENCE = "reference"   # pinned excitation 0, never refined
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    SINGULAR = "singular"


@dataclass(frozen=True)
class RigidConfig:
    iters: int = 10
    n_cg: int = 20
    damping: float = 1e-3          # Levenberg term, fraction of the trace
    halvings: int = 5
    step_tol: float = 1e-6         # rad / px
    residual_tol: float = 1e-2     # J_i / ‖y_i‖² required before declaring convergence


@dataclass
class RigidResult:
    params: list[RigidMotion]
    status: list[RigidStatus]
    s: Image
    U: DeformationSequence

    @property
    def flagged(self) -> list[int]:
        """Refined excitations that stopped without converging."""
        return [i for i, st in enumerate(self.status) if st in (RigidStatus.MAX_ITER, RigidStatus.SINGULAR)]


def rigid_init(U: DeformationSequence, mask: np.ndarray | None = None) -> list[RigidMotion]:
    """Best-fit rigid parameters of every field, the reference excitation set to zero."""
    return [RigidMotion()] + [fit_rigid(f, mask) for f in list(U)[1:]]


def _rigid_system(problem: MotionProblem, motion: RigidMotion, s: Image, i: int):
    """Gauss-Newton gradient (3,) and matrix (3, 3) of J_i in (theta, shift_x, shift_y)."""
    sub = problem.excitation(i)
    field_i = motion.field(problem.grid)
    op = MotionOperator(sub, [field_i])
    w = op.forward(s.values)[0] - sub.require_data().values[0]
    dx, dy = dU_dp(field_i, s, Axis.X), dU_dp(field_i, s, Axis.Y)
    jac = motion.jacobian(problem.grid)
    tangents = [op.encode(0, problem.coils.maps * (dx * jac[a, 0] + dy * jac[a, 1])) for a in range(3)]
    grad = np.array([2.0 * np.vdot(t, w).real for t in tangents])
    matrix = np.array([[2.0 * np.vdot(ta, tb).real for tb in tangents] for ta in tangents])
    return grad, matrix, float(np.vdot(w, w).real), float(np.vdot(sub.data.values, sub.data.values).real)


def rigid_refine(problem: MotionProblem, U0: Sequence[RigidMotion], cfg: RigidConfig | None = None) -> RigidResult:
    """Alternate CG for s with damped Gauss-Newton on each excitation's rigid parameters."""
    cfg = cfg or RigidConfig()
    if len(U0) != problem.n_exc:
        raise DimensionError(f"{len(U0)} rigid parameter sets for {problem.n_exc} excitations")
    params = [RigidMotion()] + [RigidMotion.from_vector(p.as_vector()) for p in list(U0)[1:]]
    for p in params:
        if not np.all(np.isfinite(p.as_vector())):
            raise ValueError("initial rigid parameters must be finite")
    status = [RigidStatus.REFERENCE] + [RigidStatus.MAX_ITER] * (problem.n_exc - 1)
    active = set(range(1, problem.n_exc))
    recon_cfg = ReconConfig(n_cg=cfg.n_cg)
    s = Image.zeros(problem.grid)

    def sequence() -> DeformationSequence:
        return DeformationSequence(tuple(p.field(problem.grid) for p in params))

    for it in range(cfg.iters):
        if not active:
            break
        s = cg_sense_motion(problem, sequence(), s, recon_cfg).s
        for i in sorted(active):
            grad, matrix, value, signal_power = _rigid_system(problem, params[i], s, i)
            damped = matrix + cfg.damping * np.trace(matrix) * np.eye(3)
            try:
                if np.trace(matrix) <= 0:
                    raise linalg.LinAlgError("zero curvature")
                delta = -linalg.solve(damped, grad, assume_a="pos")
            except linalg.LinAlgError:
                status[i] = RigidStatus.SINGULAR
                active.discard(i)
                logger.debug("rigid exc %d: singular normal matrix at iteration %d", i, it)
                continue
            t = 1.0
            taken = None
            for _ in range(cfg.halvings + 1):
                trial = RigidMotion.from_vector(params[i].as_vector() + t * delta)
                trial_value = excitation_objective(problem, trial.field(problem.grid), s, i)
                if trial_value < value:
                    params[i] = trial
                    value = trial_value
                    taken = t * delta
                    break
                t /= 2.0
            # A rejected step only counts as converged when the full Newton step was already negligible
            small = np.all(np.abs(delta if taken is None else taken) < cfg.step_tol)
            fits = signal_power == 0 or value <= cfg.residual_tol * signal_power
            if small and fits:
                status[i] = RigidStatus.CONVERGED
                active.discard(i)
            logger.debug("rigid exc %d iteration %d: theta %.5f deg, J_i %.6g",
                         i, it, np.rad2deg(params[i].theta), value)

    U = sequence()
    s = cg_sense_motion(problem, U, s, recon_cfg).s
    return RigidResult(params, status, s, U)
