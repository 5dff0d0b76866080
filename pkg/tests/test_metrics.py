"""Tests for metrics module."""

import math

import numpy as np
import pytest

from senseflow.errors import DimensionError
from senseflow.forward import build_problem, forward, synth_coils
from senseflow.metrics import (
    MetricReport,
    deformation_rmse,
    deformation_roughness,
    evaluate,
    image_metrics,
    mse,
    psnr,
    ssim,
    static_incompatibility,
    weighted_deformation_error,
)
from senseflow.models import DeformationField, DeformationSequence, GridSpec, Image
from senseflow.phantoms import shepp_logan
from senseflow.rng import Rng
from senseflow.sampling import radial_trajectory


def _shifted_sequence(grid: GridSpec, dx: float) -> DeformationSequence:
    moved = DeformationField.from_displacement(grid, np.full(grid.shape, dx), np.zeros(grid.shape))
    return DeformationSequence((DeformationField.identity(grid), moved, moved))


def test_equal_images():
    """Test identical images give infinite PSNR, SSIM one and zero MSE."""
    grid = GridSpec(16)
    s = shepp_logan(grid)
    p, q, m = image_metrics(s, s)
    assert math.isinf(p)
    assert q == pytest.approx(1.0)
    assert m == 0.0


def test_known_constant_offset():
    """Test zeros against 0.1 give PSNR 20 dB and scaled MSE 1.0."""
    grid = GridSpec(8)
    zeros = Image.zeros(grid)
    tenth = Image(grid, np.full(grid.shape, 0.1))
    assert psnr(zeros, tenth) == pytest.approx(20.0)
    assert mse(zeros, tenth) == pytest.approx(1.0)


def test_ssim_symmetric_and_bounded():
    """Test SSIM does not depend on argument order and stays below one for different images."""
    grid = GridSpec(32)
    a = shepp_logan(grid)
    b = Image.clipped(grid, a.values + 0.05 * np.random.default_rng(0).standard_normal(grid.shape))
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) < 1.0


def test_metric_argument_checks():
    """Test mismatched grids and bad ranges are refused."""
    a = Image.zeros(GridSpec(8))
    b = Image.zeros(GridSpec(16))
    with pytest.raises(DimensionError):
        mse(a, b)
    with pytest.raises(ValueError):
        psnr(a, a, data_range=0.0)


def test_report_consistency():
    """Test PSNR and scaled MSE of a row satisfy the log relation."""
    grid = GridSpec(16)
    ref = shepp_logan(grid)
    test = Image.clipped(grid, ref.values * 0.9)
    p, q, m = image_metrics(test, ref)
    row = MetricReport("x", 0.0, p, q, m)
    assert row.consistent()
    assert not MetricReport("bad", 0.0, p + 1.0, q, m).consistent()
    assert MetricReport("same", 0.0, math.inf, 1.0, 0.0).consistent()
    assert row.as_row()["name"] == "x"


def test_deformation_rmse_one_pixel_shift():
    """Test a one-pixel shift in every moving excitation gives an RMSE of one."""
    grid = GridSpec(16)
    U = _shifted_sequence(grid, 1.0)
    ref = DeformationSequence.identity(grid, 3)
    assert deformation_rmse(U, ref, np.ones(grid.shape, dtype=bool)) == pytest.approx(1.0)
    assert deformation_rmse(U, ref, shepp_logan(grid)) == pytest.approx(1.0)


def test_deformation_rmse_checks():
    """Test empty masks and mismatched sequences are refused."""
    grid = GridSpec(8)
    U = _shifted_sequence(grid, 1.0)
    with pytest.raises(ValueError):
        deformation_rmse(U, U, np.zeros(grid.shape, dtype=bool))
    with pytest.raises(DimensionError):
        deformation_rmse(U, DeformationSequence.identity(grid, 2), np.ones(grid.shape, dtype=bool))


def test_weighted_deformation_error():
    """Test outside-mask pixels count with weight 0.1."""
    grid = GridSpec(8)
    U = _shifted_sequence(grid, 1.0)
    ref = DeformationSequence.identity(grid, 3)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[:4] = True
    expected = 2 * (32 * 1.0 + 32 * 0.1)
    assert weighted_deformation_error(U, ref, mask) == pytest.approx(expected)


def test_deformation_roughness():
    """Test linear displacements are perfectly smooth and a bump is not."""
    grid = GridSpec(16)
    x, y = grid.coordinates()
    linear = DeformationSequence((DeformationField.identity(grid),
                                  DeformationField.from_displacement(grid, 0.1 * x, 0.05 * y)))
    assert deformation_roughness(linear) == pytest.approx(0.0, abs=1e-20)
    bump = np.zeros(grid.shape)
    bump[8, 8] = 1.0
    rough = DeformationSequence((DeformationField.identity(grid),
                                 DeformationField.from_displacement(grid, bump, bump)))
    assert deformation_roughness(rough) > 0


def _problem(U: DeformationSequence):
    grid = U.grid
    traj = radial_trajectory(48, 16, grid)
    problem = build_problem(grid, traj, U.n_exc, synth_coils(4, grid, Rng(0)))
    s = shepp_logan(grid)
    return problem.with_data(forward(U, s, problem)), s


def test_static_incompatibility_grows_with_motion():
    """Test data from a moving object fits a static image worse than static data."""
    grid = GridSpec(16)
    static, _ = _problem(DeformationSequence.identity(grid, 3))
    moving, _ = _problem(_shifted_sequence(grid, 1.5))
    assert static_incompatibility(moving, iters=40) > static_incompatibility(static, iters=40)


def test_evaluate_truth_row():
    """Test evaluating the ground truth gives zero residual and deformation error."""
    grid = GridSpec(16)
    U = _shifted_sequence(grid, 0.5)
    problem, s = _problem(U)
    row = evaluate("truth", problem, U, s, s, U_ref=U, incompatibility=1.0)
    assert row.res == pytest.approx(0.0, abs=1e-20)
    assert row.deformation_rmse == 0.0
    assert row.psnr_infinite
    assert row.static_incompatibility == 1.0
    assert row.noise_level == 0.0
