"""Tests for estimate module."""

import numpy as np
import pytest

from senseflow.deform import apply, fit_rigid, synth_rigid
from senseflow.errors import NumericalError
from senseflow.estimate import EstimateConfig, classical_refiner, estimate_motion, temporal_smooth
from senseflow.models import DeformationField, DeformationSequence, GridSpec, Image


def _blob(grid: GridSpec, shift: float = 0.0, sigma: float = 4.0) -> Image:
    x, y = grid.coordinates()
    return Image(grid, np.exp(-((x + shift) ** 2 + y ** 2) / (2 * sigma ** 2)))


def test_identical_images_give_identity():
    """Test registering equal images returns zero displacement."""
    grid = GridSpec(32)
    s = _blob(grid)
    U = estimate_motion([s, s, s], EstimateConfig(n_iter=2))
    assert U.n_exc == 3
    for field in U:
        np.testing.assert_array_equal(field.stack(), DeformationField.identity(grid).stack())


@pytest.mark.calibration
def test_translation_is_recovered():
    """Test a one-pixel x translation of a smooth blob is found near the blob."""
    grid = GridSpec(32)
    s0 = _blob(grid)
    s1 = _blob(grid, shift=1.0)
    U = estimate_motion([s0, s1, s1], EstimateConfig(n_iter=4))
    x, y = grid.coordinates()
    core = np.hypot(x, y) < 6
    for i in (1, 2):
        d_x, d_y = U[i].displacement
        assert np.median(d_x[core]) == pytest.approx(1.0, abs=0.35)
        assert abs(np.median(d_y[core])) < 0.3


def test_classical_refiner_blank_images():
    """Test all-zero images give a zero update."""
    grid = GridSpec(16)
    blank = Image.zeros(grid)
    update = classical_refiner(blank, blank, EstimateConfig())
    assert update.shape == (2, 16, 16)
    assert np.all(update == 0)


def test_custom_refiner_updates_accumulate():
    """Test a pluggable refiner's updates add up over iterations."""
    grid = GridSpec(8)
    images = [Image.zeros(grid), Image.zeros(grid)]

    def constant(warped, target, cfg):
        return np.full((2,) + warped.grid.shape, 0.1)

    U = estimate_motion(images, EstimateConfig(n_iter=3), refiner=constant)
    np.testing.assert_allclose(U[1].displacement[0], 0.3)
    np.testing.assert_array_equal(U[0].displacement[0], 0.0)


def test_initial_estimate_is_kept_by_zero_refiner():
    """Test the initial sequence passes through when the refiner adds nothing."""
    grid = GridSpec(8)
    moved = DeformationField.from_displacement(grid, np.full(grid.shape, 0.4), np.zeros(grid.shape))
    initial = DeformationSequence((DeformationField.identity(grid), moved))

    def zero(warped, target, cfg):
        return np.zeros((2,) + warped.grid.shape)

    U = estimate_motion([Image.zeros(grid)] * 2, refiner=zero, initial=initial)
    assert U[1].max_deviation(moved) < 1e-12


def test_non_finite_update_raises():
    """Test NaN updates surface as NumericalError."""
    grid = GridSpec(8)

    def broken(warped, target, cfg):
        return np.full((2,) + warped.grid.shape, np.nan)

    with pytest.raises(NumericalError):
        estimate_motion([Image.zeros(grid)] * 2, refiner=broken)


def test_estimate_needs_two_images():
    """Test a single excitation cannot be registered."""
    with pytest.raises(ValueError):
        estimate_motion([Image.zeros(GridSpec(8))])


def test_temporal_smooth_keeps_linear_drift():
    """Test a linear drift over excitations passes the quadratic regression unchanged."""
    drift = np.arange(8)[:, None, None, None] * np.ones((8, 2, 4, 4)) * 0.25
    np.testing.assert_allclose(temporal_smooth(drift, EstimateConfig()), drift, atol=1e-12)


def test_temporal_smooth_damps_jitter_and_pins_reference():
    """Test alternating jitter is reduced and excitation zero is zero."""
    jitter = (-1.0) ** np.arange(9)[:, None, None, None] * np.ones((9, 2, 2, 2))
    out = temporal_smooth(jitter, EstimateConfig())
    assert np.all(out[0] == 0)
    assert np.abs(out[2:-2]).max() < 0.5


def test_temporal_smooth_short_sequence_is_copy():
    """Test two excitations are too short to smooth."""
    d = np.ones((2, 2, 4, 4))
    out = temporal_smooth(d, EstimateConfig())
    assert np.all(out[1] == 1) and np.all(out[0] == 0)


def test_estimate_config_validation():
    """Test invalid settings are refused."""
    with pytest.raises(ValueError):
        EstimateConfig(n_iter=0)
    with pytest.raises(ValueError):
        EstimateConfig(smoothness=0.0)


def _blobs(grid: GridSpec) -> Image:
    x, y = grid.coordinates()
    values = np.zeros(grid.shape)
    for cx, cy, sigma, weight in [(10, 0, 4, 1.0), (-6, 8, 3, 0.8), (-4, -12, 5, 0.6), (14, 14, 3, 0.5)]:
        values += weight * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
    return Image(grid, values)


@pytest.mark.calibration
@pytest.mark.parametrize("degrees", [5.0, -5.0])
def test_rigid_rotation_is_recovered(degrees):
    """Test a five degree rotation is read back from the estimate within 1.5 degrees."""
    grid = GridSpec(64)
    s0 = _blobs(grid)
    truth = synth_rigid(np.deg2rad(degrees), (0.0, 0.0), grid)
    s1 = apply(truth, s0)
    U = estimate_motion([s0, s1, s1], EstimateConfig(n_iter=4))
    gy, gx = np.gradient(s0.values)
    edges = np.hypot(gx, gy) > 0.1 * np.hypot(gx, gy).max()
    for i in (1, 2):
        theta = np.rad2deg(fit_rigid(U[i], edges).theta)
        assert theta == pytest.approx(degrees, abs=1.5)
