"""CG-SENSE plus motion, per-excitation reconstructions and TV denoising."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, NumericalError
from .forward import MotionOperator, MotionProblem, as_fields
from .models import DeformationSequence, Image

logger = logging.getLogger(__name__)

MAX_HALVINGS = 8
TV_STEP = 0.25


@dataclass(frozen=True)
class ReconConfig:
    n_cg: int = 10
    tolerance: float = 0.0        # stop when ‖R‖ <= tolerance·‖y‖; 0 runs all iterations
    positivity: bool = True
    tv_lambda: float = 0.0
    tv_iters: int = 50

    def __post_init__(self) -> None:
        if self.n_cg < 1:
            raise ValueError(f"n_cg must be >= 1, got {self.n_cg}")
        if self.tv_lambda < 0:
            raise ValueError(f"TV weight must be nonnegative, got {self.tv_lambda}")


@dataclass
class ReconResult:
    s: Image
    history: list[float] = field(default_factory=list)   # objective, starting at iteration 0
    residual_norm: float = 0.0

    @property
    def objective(self) -> float:
        return self.history[-1]


def _check_finite(value: float, iteration: int) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"CG objective became non-finite at iteration {iteration}")
    return value


def cg_sense_motion(problem: MotionProblem, U: DeformationSequence, s0: Image,
                    cfg: ReconConfig | None = None) -> ReconResult:
    """Projected Polak-Ribière CG on ‖𝒜(U, s) - y‖² over s >= 0."""
    cfg = cfg or ReconConfig()
    if s0.grid != problem.grid:
        raise DimensionError(f"initial image grid {s0.grid.n} and problem grid {problem.grid.n} differ")
    y = problem.require_data().values
    op = MotionOperator(problem, as_fields(U))
    y_norm = float(np.sqrt(np.vdot(y, y).real))

    s = np.maximum(s0.values, 0.0) if cfg.positivity else s0.values.astype(float)
    r = op.forward(s) - y
    f = _check_finite(float(np.vdot(r, r).real), 0)
    history = [f]
    g = 2.0 * op.adjoint(r)
    d = -g

    for it in range(1, cfg.n_cg + 1):
        gg = float(np.vdot(g, g))
        if gg == 0.0:
            break
        slope = float(np.vdot(g, d))
        if slope >= 0:
            d, slope = -g, -gg
        Ad = op.forward(d)
        curvature = float(np.vdot(Ad, Ad).real)
        if curvature == 0.0:
            break
        alpha = -slope / (2.0 * curvature)

        for _ in range(MAX_HALVINGS + 1):
            trial = s + alpha * d
            projected = cfg.positivity and bool(np.any(trial < 0))
            if projected:
                trial = np.maximum(trial, 0.0)
                r_trial = op.forward(trial) - y
            else:
                r_trial = r + alpha * Ad
            f_trial = _check_finite(float(np.vdot(r_trial, r_trial).real), it)
            if f_trial <= f:
                break
            alpha /= 2.0
        else:
            logger.debug("CG stalled at iteration %d: no decrease after %d halvings", it, MAX_HALVINGS)
            break

        s, r, f = trial, r_trial, f_trial
        history.append(f)
        logger.debug("CG iteration %d: J = %.6g (step %.3g%s)", it, f, alpha, ", projected" if projected else "")
        if cfg.tolerance and np.sqrt(f) <= cfg.tolerance * y_norm:
            break

        g_new = 2.0 * op.adjoint(r)
        if projected:
            d = -g_new
        else:
            beta = max(0.0, float(np.vdot(g_new, g_new - g)) / gg)
            d = -g_new + beta * d
        g = g_new

    return ReconResult(Image.clipped(problem.grid, s), history, float(np.sqrt(f)))


def per_excitation_recon(problem: MotionProblem, i: int, cfg: ReconConfig | None = None) -> Image:
    """Undersampled static CG-SENSE image s_i from excitation i's data alone."""
    if not 0 <= i < problem.n_exc:
        raise IndexError(f"excitation {i} out of range 0..{problem.n_exc - 1}")
    sub = problem.excitation(i)
    cfg = cfg or ReconConfig(n_cg=10)
    identity = DeformationSequence.identity(problem.grid, 1)
    return cg_sense_motion(sub, identity, Image.zeros(problem.grid), cfg).s


def per_excitation_recons(problem: MotionProblem, cfg: ReconConfig | None = None) -> list[Image]:
    return [per_excitation_recon(problem, i, cfg) for i in range(problem.n_exc)]


def _gradient(u: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return np.stack([gy, gx])


def _divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_gradient`."""
    py, px = p
    div = np.zeros_like(px)
    div[:, 0] += px[:, 0]
    div[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    div[:, -1] -= px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] -= py[-2, :]
    return div


def total_variation(values: np.ndarray) -> float:
    grad = _gradient(np.asarray(values, dtype=float))
    return float(np.sum(np.sqrt(grad[0] ** 2 + grad[1] ** 2)))


def tv_denoise(s: Image, lam: float, iters: int = 50) -> Image:
    """min_u ½‖u - s‖² + λ TV(u) by dual projection, clamped to u >= 0."""
    if lam < 0:
        raise ValueError(f"TV weight must be nonnegative, got {lam}")
    if lam == 0:
        return Image(s.grid, s.values.copy())
    f = s.values
    p = np.zeros((2,) + f.shape)
    for _ in range(iters):
        step = _gradient(_divergence(p) - f / lam)
        norm = np.sqrt(step[0] ** 2 + step[1] ** 2)
        p = (p + TV_STEP * step) / (1.0 + TV_STEP * norm)
    return Image.clipped(s.grid, f - lam * _divergence(p))


def reconstruct(problem: MotionProblem, U: DeformationSequence, cfg: ReconConfig | None = None,
                s0: Image | None = None) -> ReconResult:
    """CG reconstruction under U followed by optional TV denoising."""
    cfg = cfg or ReconConfig()
    start = Image.zeros(problem.grid) if s0 is None else s0
    result = cg_sense_motion(problem, U, start, cfg)
    if cfg.tv_lambda > 0:
        result = replace(result, s=tv_denoise(result.s, cfg.tv_lambda, cfg.tv_iters))
    return result
