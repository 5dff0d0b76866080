"""Image quality and deformation error measures."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError
from .forward import MotionProblem, residuum
from .models import DeformationSequence, Image
from .recon import ReconConfig, cg_sense_motion

logger = logging.getLogger(__name__)

MSE_SCALE = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5          # 11 x 11 window at sigma 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
OUTSIDE_WEIGHT = 0.1
STATIC_CG_ITERS = 200


@dataclass
class MetricReport:
    """One row of an evaluation table."""
    name: str
    res: float
    psnr: float
    ssim: float
    mse: float
    deformation_rmse: float | None = None
    static_incompatibility: float | None = None
    noise_level: float = 0.0

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)

    def consistent(self, data_range: float = 1.0, rel: float = 1e-9) -> bool:
        """PSNR = 10 log10(range² · 100 / MSE) holds for this row."""
        if self.mse == 0:
            return self.psnr_infinite
        expected = 10.0 * math.log10(data_range ** 2 * MSE_SCALE / self.mse)
        return abs(expected - self.psnr) <= rel * max(1.0, abs(expected))

    def as_row(self) -> dict:
        return asdict(self)


def _check_pair(test: Image, ref: Image) -> None:
    if test.grid != ref.grid:
        raise DimensionError(f"image grids {test.grid.n} and {ref.grid.n} differ")


def mse(test: Image, ref: Image) -> float:
    """Plain mean squared error scaled by 100."""
    _check_pair(test, ref)
    return MSE_SCALE * float(np.mean((test.values - ref.values) ** 2))


def psnr(test: Image, ref: Image, data_range: float = 1.0) -> float:
    _check_pair(test, ref)
    if data_range <= 0:
        raise ValueError(f"data range must be positive, got {data_range}")
    plain = float(np.mean((test.values - ref.values) ** 2))
    if plain == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / plain)


def ssim(test: Image, ref: Image, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window."""
    _check_pair(test, ref)
    if data_range <= 0:
        raise ValueError(f"data range must be positive, got {data_range}")

    def blur(values: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(values, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    a, b = test.values, ref.values
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def image_metrics(test: Image, ref: Image, data_range: float = 1.0) -> tuple[float, float, float]:
    """(psnr, ssim, mse) of ``test`` against ``ref``."""
    return psnr(test, ref, data_range), ssim(test, ref, data_range), mse(test, ref)


def _support(mask) -> np.ndarray:
    values = mask.values > 0 if isinstance(mask, Image) else np.asarray(mask, dtype=bool)
    if not values.any():
        raise ValueError("deformation error mask is empty")
    return values


def _check_sequences(U: DeformationSequence, U_ref: DeformationSequence) -> None:
    if U.grid != U_ref.grid or U.n_exc != U_ref.n_exc:
        raise DimensionError("deformation sequences differ in grid or excitation count")


def deformation_rmse(U: DeformationSequence, U_ref: DeformationSequence, mask) -> float:
    """RMS Euclidean coordinate error in px over the mask, excitations 1 onwards."""
    _check_sequences(U, U_ref)
    support = _support(mask)
    if U.n_exc < 2:
        raise ValueError("deformation error needs at least two excitations")
    diff = U.stack()[1:] - U_ref.stack()[1:]
    squared = np.sum(diff ** 2, axis=1)[:, support]
    return float(np.sqrt(np.mean(squared)))


def weighted_deformation_error(U: DeformationSequence, U_ref: DeformationSequence, mask) -> float:
    """Squared coordinate error weighted 1 on the support and 0.1 elsewhere."""
    _check_sequences(U, U_ref)
    support = _support(mask)
    weights = np.where(support, 1.0, OUTSIDE_WEIGHT)
    diff = U.stack() - U_ref.stack()
    return float(np.sum(weights * np.sum(diff ** 2, axis=1)))


def deformation_roughness(U: DeformationSequence) -> float:
    """Sum of squared second differences of the displacement along x and y."""
    total = 0.0
    for f in U:
        for d in f.displacement:
            total += float(np.sum(np.diff(d, n=2, axis=1) ** 2) + np.sum(np.diff(d, n=2, axis=0) ** 2))
    return total


def static_incompatibility(problem: MotionProblem, iters: int = STATIC_CG_ITERS) -> float:
    """Residual left by the best static reconstruction of the data."""
    identity = DeformationSequence.identity(problem.grid, problem.n_exc)
    result = cg_sense_motion(problem, identity, Image.zeros(problem.grid), ReconConfig(n_cg=iters))
    _, value = residuum(identity, result.s, problem)
    logger.debug("static incompatibility %.6g after %d CG iterations", value, len(result.history) - 1)
    return value


def evaluate(name: str, problem: MotionProblem, U: DeformationSequence, s: Image, ref: Image,
             U_ref: DeformationSequence | None = None, incompatibility: float | None = None) -> MetricReport:
    """Assemble a report row for reconstruction ``s`` under deformation ``U``."""
    data_range = float(ref.values.max()) or 1.0
    p, q, m = image_metrics(s, ref, data_range)
    _, res = residuum(U, s, problem)
    rmse = None
    if U_ref is not None and U.n_exc > 1:
        rmse = deformation_rmse(U, U_ref, ref)
    noise = problem.data.noise_level if problem.data is not None else 0.0
    return MetricReport(name, res, p, q, m, rmse, incompatibility, noise)
