"""Tests for gradients module."""

import numpy as np
import pytest

from senseflow.errors import DimensionError
from senseflow.forward import MotionOperator, build_problem, forward, residuum, synth_coils
from senseflow.gradients import (
    FLOOR_FRACTION,
    GradientField,
    excitation_objectives,
    fd_check,
    floor_diagonal,
    grad_U,
    hessian_diag,
    precondition,
)
from senseflow.models import Axis, DeformationField, DeformationSequence, GridSpec, Image, OperatorPath
from senseflow.rng import Rng
from senseflow.sampling import radial_trajectory


def _shifted(grid: GridSpec, dx: float, dy: float) -> DeformationField:
    return DeformationField.from_displacement(grid, np.full(grid.shape, dx), np.full(grid.shape, dy))


def _setup(path=OperatorPath.DFFT):
    grid = GridSpec(16)
    traj = radial_trajectory(16, 16, grid)
    problem = build_problem(grid, traj, 2, synth_coils(3, grid, Rng(4)), path)
    s = Image(grid, np.random.default_rng(2).random(grid.shape))
    truth = DeformationSequence((DeformationField.identity(grid), _shifted(grid, 0.6, -0.4)))
    problem = problem.with_data(forward(truth, s, problem))
    guess = DeformationSequence((DeformationField.identity(grid), _shifted(grid, 0.3, -0.3)))
    return problem, truth, guess, s


@pytest.mark.parametrize("path", [OperatorPath.DFFT, OperatorPath.NUFFT])
@pytest.mark.parametrize("axis", [Axis.X, Axis.Y])
def test_gradient_matches_central_difference(path, axis):
    """Test the analytic gradient agrees with a central difference of J."""
    problem, _, guess, s = _setup(path)
    for pixel in [(8, 8), (5, 10), (11, 3)]:
        assert fd_check(problem, guess, s, pixel, axis) <= 1e-4


def test_gradient_vanishes_at_truth():
    """Test the gradient is zero when the motion explains the data."""
    problem, truth, _, s = _setup()
    g = grad_U(problem, truth, s)
    assert g.norm() == pytest.approx(0.0, abs=1e-10)
    assert g.n_exc == 2


def test_pinned_zeroes_reference_block():
    """Test pinning clears excitation zero only."""
    problem, _, guess, s = _setup()
    g = grad_U(problem, guess, s).pinned()
    assert np.all(g.gx[0] == 0) and np.all(g.gy[0] == 0)
    assert np.any(g.gx[1] != 0)


def test_floor_diagonal_lower_bound():
    """Test the floored diagonal is at least 5% of each excitation's peak."""
    diag = np.zeros((2, 4, 4))
    diag[0, 1, 1] = 10.0
    floored = floor_diagonal(diag)
    assert floored[0].min() == pytest.approx(FLOOR_FRACTION * 10.0)
    assert floored[0, 1, 1] == pytest.approx(10.5)
    assert np.all(floored[1] > 0)


def test_hessian_and_preconditioner():
    """Test the Hessian diagonal is positive after flooring and scales the gradient."""
    problem, _, guess, s = _setup()
    H = hessian_diag(problem, guess, s)
    np.testing.assert_allclose(H.kappa, problem.kappa)
    assert np.all(H.hbar_x > 0) and np.all(H.hbar_y > 0)
    for i in range(2):
        assert H.hbar_x[i].min() >= FLOOR_FRACTION * H.diag_x[i].max()
    g = grad_U(problem, guess, s)
    pre = precondition(g, H)
    np.testing.assert_allclose(pre.gx * H.hbar_x, g.gx)


def test_precondition_shape_mismatch():
    """Test mismatched gradient and Hessian shapes are refused."""
    problem, _, guess, s = _setup()
    H = hessian_diag(problem, guess, s)
    g = GradientField(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)))
    with pytest.raises(DimensionError):
        precondition(g, H)


def test_excitation_objectives_sum_to_total():
    """Test per-excitation objectives are zero for the reference and positive for a wrong guess."""
    problem, _, guess, s = _setup()
    J = excitation_objectives(problem, guess, s)
    assert J[0] == pytest.approx(0.0, abs=1e-20)
    assert J[1] > 0


def test_fd_check_argument_validation():
    """Test bad steps and pixels are refused."""
    problem, _, guess, s = _setup()
    with pytest.raises(ValueError):
        fd_check(problem, guess, s, (1, 1), "x", h=0.0)
    with pytest.raises(IndexError):
        fd_check(problem, guess, s, (16, 1), "x")


def _cell_fraction(grid: GridSpec, p: np.ndarray) -> np.ndarray:
    return (p + grid.n / 2 - 0.5) % 1.0


def _random_guess(grid: GridSpec, n_exc: int, seed: int, amplitude: float = 0.4) -> DeformationSequence:
    gen = np.random.default_rng(seed)
    fields = [DeformationField.identity(grid)] + [
        DeformationField.from_displacement(
            grid, gen.uniform(-amplitude, amplitude, grid.shape), gen.uniform(-amplitude, amplitude, grid.shape))
        for _ in range(1, n_exc)
    ]
    return DeformationSequence(tuple(fields))


def _interior_pixels(field: DeformationField, margin: float) -> np.ndarray:
    grid = field.grid
    fx, fy = _cell_fraction(grid, field.p_x), _cell_fraction(grid, field.p_y)
    inside = (fx > margin) & (fx < 1 - margin) & (fy > margin) & (fy < 1 - margin)
    return np.argwhere(inside)


@pytest.mark.parametrize("axis", [Axis.X, Axis.Y])
def test_gradient_matches_central_difference_for_random_motion(axis):
    """Test the analytic gradient at a hundred random pixels of a random deformation."""
    problem, _, _, s = _setup()
    guess = _random_guess(problem.grid, 2, seed=11)
    g = grad_U(problem, guess, s).component(axis)[1]
    candidates = _interior_pixels(guess[1], margin=0.01)
    strong = [tuple(px) for px in candidates if abs(g[tuple(px)]) >= 1e-3 * np.abs(g).max()]
    assert len(strong) >= 100
    gen = np.random.default_rng(12)
    for idx in gen.permutation(len(strong))[:100]:
        assert fd_check(problem, guess, s, strong[idx], axis, excitation=1) <= 1e-4


def test_hessian_diagonal_matches_second_difference():
    """Test the raw Hessian diagonal equals a second difference of J, and κ_i = M_i / N²."""
    grid = GridSpec(8)
    traj = radial_trajectory(8, 8, grid)
    problem = build_problem(grid, traj, 2, synth_coils(2, grid, Rng(3)), OperatorPath.DFFT)
    s = Image(grid, np.random.default_rng(6).random(grid.shape))
    truth = _random_guess(grid, 2, seed=7, amplitude=0.3)
    problem = problem.with_data(forward(truth, s, problem))
    guess = _random_guess(grid, 2, seed=8, amplitude=0.3)
    H = hessian_diag(problem, guess, s)

    op = MotionOperator(problem, guess.fields)
    for i in range(2):
        delta = np.zeros((1,) + grid.shape)
        delta[0, 3, 5] = 1.0
        brute_kappa = np.sum(np.abs(op.encode(i, delta)) ** 2)
        assert brute_kappa == pytest.approx(problem.masks.counts[i] / 64, abs=1e-3)
        assert H.kappa[i] == pytest.approx(brute_kappa, abs=1e-3)

    h = 0.05
    checked = 0
    J0 = residuum(guess, s, problem)[1]
    for axis, diag in [(Axis.X, H.diag_x[1]), (Axis.Y, H.diag_y[1])]:
        for j, k in _interior_pixels(guess[1], margin=0.1):
            if diag[j, k] < 1e-3 * diag.max():
                continue
            Jp = residuum(_nudged(guess, 1, j, k, axis, h), s, problem)[1]
            Jm = residuum(_nudged(guess, 1, j, k, axis, -h), s, problem)[1]
            second = (Jp - 2 * J0 + Jm) / h ** 2
            assert second == pytest.approx(diag[j, k], rel=1e-3)
            checked += 1
    assert checked > 0


def _nudged(U: DeformationSequence, i: int, j: int, k: int, axis: Axis, delta: float) -> DeformationSequence:
    fields = list(U.fields)
    p_x, p_y = fields[i].p_x.copy(), fields[i].p_y.copy()
    (p_x if axis is Axis.X else p_y)[j, k] += delta
    fields[i] = DeformationField(fields[i].grid, p_x, p_y)
    return DeformationSequence(tuple(fields))
