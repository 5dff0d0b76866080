"""Tests for recon module."""

import numpy as np
import pytest

from senseflow.errors import DimensionError
from senseflow.forward import build_problem, forward, synth_coils
from senseflow.metrics import psnr
from senseflow.models import DeformationField, DeformationSequence, GridSpec, Image, OperatorPath, PhantomKind
from senseflow.phantoms import make_phantom, shepp_logan
from senseflow.recon import (
    ReconConfig,
    cg_sense_motion,
    per_excitation_recon,
    per_excitation_recons,
    reconstruct,
    total_variation,
    tv_denoise,
)
from senseflow.rng import Rng
from senseflow.sampling import radial_trajectory


def _problem_with_data(n_exc: int = 2, n_spokes: int = 32):
    grid = GridSpec(16)
    traj = radial_trajectory(n_spokes, 16, grid)
    problem = build_problem(grid, traj, n_exc, synth_coils(4, grid, Rng(0)))
    fields = [DeformationField.identity(grid)]
    fields += [DeformationField.from_displacement(grid, np.full(grid.shape, 0.5), np.zeros(grid.shape))
               for _ in range(n_exc - 1)]
    U = DeformationSequence(tuple(fields))
    s = shepp_logan(grid)
    return problem.with_data(forward(U, s, problem)), U, s


def test_cg_objective_is_monotone():
    """Test the CG objective never increases."""
    problem, U, _ = _problem_with_data()
    result = cg_sense_motion(problem, U, Image.zeros(problem.grid), ReconConfig(n_cg=15))
    history = np.array(result.history)
    assert np.all(np.diff(history) <= 1e-12 * history[0])
    assert result.objective < 0.1 * history[0]
    assert result.residual_norm == pytest.approx(np.sqrt(result.objective))


def test_cg_result_is_nonnegative():
    """Test the projected iteration returns a nonnegative image."""
    problem, U, _ = _problem_with_data()
    result = cg_sense_motion(problem, U, Image.zeros(problem.grid), ReconConfig(n_cg=5))
    assert result.s.values.min() >= 0.0


def test_cg_tolerance_stops_early():
    """Test a loose relative tolerance ends the iteration before n_cg."""
    problem, U, _ = _problem_with_data()
    result = cg_sense_motion(problem, U, Image.zeros(problem.grid), ReconConfig(n_cg=50, tolerance=0.5))
    assert len(result.history) < 51


def test_cg_starting_at_truth_stays_there():
    """Test consistent data and the true image give a zero objective."""
    problem, U, s = _problem_with_data()
    result = cg_sense_motion(problem, U, s, ReconConfig(n_cg=3))
    assert result.history[0] == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(result.s.values, s.values, atol=1e-12)


def test_cg_rejects_grid_mismatch():
    """Test the initial image must live on the problem grid."""
    problem, U, _ = _problem_with_data()
    with pytest.raises(DimensionError):
        cg_sense_motion(problem, U, Image.zeros(GridSpec(8)))


def test_recon_config_validation():
    """Test invalid iteration counts and TV weights are refused."""
    with pytest.raises(ValueError):
        ReconConfig(n_cg=0)
    with pytest.raises(ValueError):
        ReconConfig(tv_lambda=-1.0)


def test_per_excitation_recons():
    """Test one image per excitation and bounds checking."""
    problem, _, _ = _problem_with_data()
    images = per_excitation_recons(problem, ReconConfig(n_cg=3))
    assert len(images) == 2
    assert all(img.grid == problem.grid for img in images)
    with pytest.raises(IndexError):
        per_excitation_recon(problem, 2)
    with pytest.raises(IndexError):
        per_excitation_recon(problem, -1)


def test_tv_denoise_constant_is_fixed_point():
    """Test a constant image is unchanged by TV denoising."""
    grid = GridSpec(16)
    image = Image(grid, np.full(grid.shape, 0.5))
    np.testing.assert_allclose(tv_denoise(image, 0.1).values, 0.5, atol=1e-12)


def test_tv_denoise_reduces_variation():
    """Test denoising a noisy flat image lowers its total variation."""
    grid = GridSpec(32)
    noisy = 0.5 + 0.1 * np.random.default_rng(0).standard_normal(grid.shape)
    image = Image.clipped(grid, noisy)
    out = tv_denoise(image, 0.1)
    assert total_variation(out.values) < 0.7 * total_variation(image.values)
    assert out.values.min() >= 0.0


def test_tv_denoise_zero_weight_copies():
    """Test lambda zero returns the input and negative weights are refused."""
    grid = GridSpec(8)
    image = Image(grid, np.random.default_rng(1).random(grid.shape))
    np.testing.assert_array_equal(tv_denoise(image, 0.0).values, image.values)
    with pytest.raises(ValueError):
        tv_denoise(image, -0.1)


def test_reconstruct_applies_tv():
    """Test reconstruct with a TV weight returns a smoother image than plain CG."""
    problem, U, _ = _problem_with_data()
    plain = reconstruct(problem, U, ReconConfig(n_cg=5))
    smooth = reconstruct(problem, U, ReconConfig(n_cg=5, tv_lambda=0.05))
    assert total_variation(smooth.s.values) < total_variation(plain.s.values)
    assert smooth.history == plain.history


@pytest.mark.calibration
def test_static_data_recovers_band_limited_image():
    """Test fifty CG iterations on noise-free static data reach 50 dB PSNR."""
    grid = GridSpec(64)
    traj = radial_trajectory(101, 64, grid)
    problem = build_problem(grid, traj, 1, synth_coils(4, grid, Rng(42)), OperatorPath.DFFT)
    s = make_phantom(PhantomKind.DISKS, grid, Rng(42))
    identity = DeformationSequence.identity(grid, 1)
    problem = problem.with_data(forward(identity, s, problem))
    result = cg_sense_motion(problem, identity, Image.zeros(grid), ReconConfig(n_cg=50, positivity=False))
    assert psnr(result.s, s, float(s.values.max())) >= 50.0
