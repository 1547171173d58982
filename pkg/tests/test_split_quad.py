import logging

import numpy as np
import pytest
from pytest import raises
from scipy.stats import norm

from ebdsfilter.evaluate import fit_slope
from ebdsfilter.exception import DegenerateDensity, InvalidParams, Unsupported
from ebdsfilter.grid import Grid1D, GridDensity
from ebdsfilter.model import DerivativeMode, DiffusionModel, unit_likelihood
from ebdsfilter.operators import grid_mass
from ebdsfilter.reference import kalman_density, kalman_filter_run
from ebdsfilter.simulate import ObservationSequence, TimeGrid
from ebdsfilter.split_quad import (
    DEFAULT_GH_ORDER,
    QuadPredictor,
    _interpolation_matrix,
    gauss_hermite,
    quad_filter_batch,
    quad_filter_run,
    quad_predict_step,
    standalone_fokker_planck,
)


def test_gauss_hermite_moments():
    nodes, weights = gauss_hermite(21)
    assert np.isclose(weights.sum(), 1.0)
    assert np.isclose(weights @ nodes, 0.0, atol=1e-12)
    assert np.isclose(weights @ nodes**2, 1.0)
    assert np.isclose(weights @ nodes**4, 3.0)


def test_interpolation_matrix():
    grid = Grid1D(0.0, 1.0, 11)
    points = np.array([-0.5, 0.0, 0.25, 0.55, 1.0, 1.5])
    matrix = _interpolation_matrix(points, grid)
    out = matrix @ (2.0 * grid.nodes + 1.0)
    assert np.allclose(out, [0.0, 1.0, 1.5, 2.1, 3.0, 0.0])


def test_grid_density_gradient():
    grid = Grid1D(-1.0, 2.0, 301)
    dens = GridDensity(grid, np.sin(grid.nodes))
    assert np.allclose(dens.gradient[1:-1], np.cos(grid.nodes[1:-1]), atol=1e-4)


def test_zero_step_is_identity(drifted_bm):
    model, _, _ = drifted_bm
    grid = Grid1D(-3.0, 3.0, 61)
    matrix = QuadPredictor(model, grid, 0.0).matrix.toarray()
    assert np.allclose(matrix, np.eye(grid.points))


def test_constant_coefficient_columns_sum_to_one(drifted_bm):
    model, _, _ = drifted_bm
    grid = Grid1D(-8.0, 12.0, 1000)
    predictor = QuadPredictor(model, grid, 0.05)
    sums = np.asarray(predictor.matrix.sum(axis=0)).ravel()
    assert np.allclose(sums[200:800], 1.0, atol=1e-10)


@pytest.mark.parametrize("points", [500, 4000])
def test_row_weight_does_not_grow_with_resolution(drifted_bm, points):
    model, _, _ = drifted_bm
    grid = Grid1D(-8.0, 12.0, points)
    matrix = QuadPredictor(model, grid, 1.0 / 16).matrix
    row = abs(matrix[points // 2]).sum()
    # tau f1 / s = -1 here, so the row carries sum_q w_q |1 - xi_q|
    xi, weights = gauss_hermite(DEFAULT_GH_ORDER)
    assert row == pytest.approx(weights @ np.abs(1.0 - xi), rel=1e-10)
    assert row < 1.2


def test_heat_standalone_is_exact_in_time(heat):
    model, _, init = heat
    grid = Grid1D(-12.0, 12.0, 2000)
    exact = norm.pdf(grid.nodes, scale=np.sqrt(2.0))
    errors = []
    for N in (1, 2, 4, 8, 16):
        terminal = standalone_fokker_planck(model, init, grid, N, 1.0)
        errors.append(np.max(np.abs(terminal.values - exact)))
    # only interpolation error remains; nothing decays like 1/N
    assert max(errors) <= 1e-4


def test_heat_standalone_matches_heat_kernel(heat):
    model, _, init = heat
    grid = Grid1D(-12.0, 12.0, 2000)
    terminal = standalone_fokker_planck(model, init, grid, N=16, T=1.0)
    exact = norm.pdf(grid.nodes, scale=np.sqrt(2.0))
    assert np.max(np.abs(terminal.values - exact)) <= 2e-3
    assert terminal.time_index == (0, 16)


def test_drifted_bm_standalone_order_one(drifted_bm):
    model, _, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 2000)
    exact = norm.pdf(grid.nodes, loc=2.0, scale=np.sqrt(2.0))
    Ns = [32, 64, 128, 256]
    errors = [
        np.max(
            np.abs(standalone_fokker_planck(model, init, grid, N, 1.0).values - exact)
        )
        for N in Ns
    ]
    assert all(a > b for a, b in zip(errors, errors[1:]))
    slope, _ = fit_slope(Ns, errors)
    assert -1.25 <= slope <= -0.8


@pytest.mark.parametrize("tau,steps", [(0.1, 5), (0.05, 20), (0.01, 100)])
def test_prediction_conserves_mass(drifted_bm, tau, steps):
    model, _, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 1000)
    dens = GridDensity(grid, init.value(grid.column), (0, 0))
    start = grid_mass(dens.values, grid)
    for _ in range(steps):
        dens = quad_predict_step(model, dens, tau)
    assert dens.time_index == (0, steps)
    assert 0.98 <= grid_mass(dens.values, grid) / start <= 1.02


def test_heat_prediction_conserves_mass(heat):
    model, _, init = heat
    grid = Grid1D(-10.0, 10.0, 1000)
    values = init.value(grid.column)
    predictor = QuadPredictor(model, grid, 0.1)
    for _ in range(10):
        values = predictor(values)
    assert grid_mass(values, grid) == pytest.approx(1.0, abs=1e-6)


def test_negative_values_warn_once(drifted_bm, caplog):
    model, _, _ = drifted_bm
    grid = Grid1D(-5.0, 5.0, 200)
    spike = np.zeros(grid.points)
    spike[100] = 1.0
    predictor = QuadPredictor(model, grid, 1.0)
    assert np.min(predictor.matrix.toarray()) < 0.0
    with caplog.at_level(logging.WARNING, logger="ebdsfilter.split_quad"):
        for _ in range(3):
            assert np.all(predictor(spike) >= 0.0)
    warned = [r for r in caplog.records if "negative values" in r.getMessage()]
    assert len(warned) == 1


def test_unbounded_drift_reports_escaping_rows(bistable, drifted_bm, caplog):
    grid = Grid1D(-8.0, 12.0, 400)
    with caplog.at_level(logging.WARNING, logger="ebdsfilter.split_quad"):
        steep = QuadPredictor(bistable[0], grid, 0.1)
        flat = QuadPredictor(drifted_bm[0], grid, 0.1)
    assert steep.escaping_rows.size > 0
    assert grid.points - 1 in steep.escaping_rows
    assert not np.any(steep.matrix[steep.escaping_rows].toarray())
    assert flat.escaping_rows.size == 0
    warned = [r for r in caplog.records if "off the grid" in r.getMessage()]
    assert len(warned) == 1


def test_gh_refinement_is_stable(bistable):
    model, _, init = bistable
    grid = Grid1D(-5.0, 5.0, 2000)
    values = init.value(grid.column)
    coarse = QuadPredictor(model, grid, 0.01, 21)(values)
    fine = QuadPredictor(model, grid, 0.01, 41)(values)
    # both orders integrate the same piecewise-linear interpolant
    assert np.max(np.abs(coarse - fine)) <= 1e-5


def test_predictor_rejects_bad_params(bistable):
    model, _, _ = bistable
    grid = Grid1D(-5.0, 5.0, 50)
    with raises(InvalidParams):
        QuadPredictor(model, grid, 0.1, gh_order=3)
    with raises(InvalidParams):
        QuadPredictor(model, grid, -0.1)
    planar = DiffusionModel(
        d=2,
        drift=lambda x: x,
        diffusion=lambda x: np.ones((x.shape[0], 2, 1)),
        derivative_mode=DerivativeMode.FINITE_DIFFERENCE,
    )
    with raises(Unsupported):
        QuadPredictor(planar, grid, 0.1)


def test_filter_matches_kalman_at_updates(drifted_bm):
    model, obs, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 2000)
    time = TimeGrid(2.0, 20, 32)
    y = ObservationSequence(2.0 * time.window * np.arange(21.0)[None, :])
    run = quad_filter_run(model, obs, init, grid, time, y, normalized_updates=True)
    beliefs = kalman_filter_run(model, obs, init, time, y)
    for k in range(21):
        exact = kalman_density(beliefs[(k, 0)], grid).values
        assert np.max(np.abs(run[(k, 0)].values - exact)) <= 0.02


def test_filter_batch_equals_single_runs(drifted_bm):
    model, obs, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 300)
    time = TimeGrid(0.5, 2, 3)
    ys = [
        ObservationSequence(np.array([[0.0, 0.5, 1.0]])),
        ObservationSequence(np.array([[1.0, 1.0, 0.0]])),
    ]
    batch = quad_filter_batch(model, obs, init, grid, time, ys)
    assert set(batch) == set(time.indices())
    for s, y in enumerate(ys):
        single = quad_filter_run(model, obs, init, grid, time, y)
        for index, dens in single.items():
            assert np.allclose(batch[index][s], dens.values)


def test_filter_unnormalized_and_normalized_agree_in_shape(drifted_bm):
    model, obs, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 300)
    time = TimeGrid(0.5, 2, 2)
    ys = [ObservationSequence(np.array([[0.0, 0.5, 1.0]]))]
    raw = quad_filter_batch(model, obs, init, grid, time, ys)
    normalized = quad_filter_batch(
        model, obs, init, grid, time, ys, normalized_updates=True
    )
    final = raw[(2, 0)][0] / grid_mass(raw[(2, 0)][0], grid)
    assert np.allclose(final, normalized[(2, 0)][0])
    assert np.isclose(grid_mass(normalized[(2, 0)][0], grid), 1.0)


def test_filter_rejects_short_sequences(drifted_bm):
    model, obs, init = drifted_bm
    with raises(InvalidParams):
        quad_filter_batch(
            model, obs, init, Grid1D(-5.0, 5.0, 50), TimeGrid(1.0, 3, 2),
            [ObservationSequence(np.zeros((1, 2)))],
        )


def test_update_far_from_grid_is_degenerate(drifted_bm):
    model, obs, init = drifted_bm
    with raises(DegenerateDensity):
        quad_filter_batch(
            model, obs, init, Grid1D(-2.0, 2.0, 50), TimeGrid(0.1, 1, 1),
            [ObservationSequence(np.array([[0.0, 1e4]]))],
        )


@pytest.mark.parametrize("order", [5, 21])
def test_unit_likelihood_filter_is_pure_prediction(heat, order):
    model, _, init = heat
    grid = Grid1D(-10.0, 10.0, 400)
    time = TimeGrid(1.0, 2, 4)
    ys = [ObservationSequence(np.zeros((1, 3)))]
    run = quad_filter_batch(model, unit_likelihood(), init, grid, time, ys, order)
    assert np.allclose(run[(0, 4)], run[(1, 0)])
