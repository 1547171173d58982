import numpy as np
import pytest
from pydantic import ValidationError
from pytest import raises

from ebdsfilter import rng as rngs
from ebdsfilter.ebds import (
    FilterPipeline,
    OptimizerConfig,
    OptimizerName,
    TrainConfig,
    cold_network,
    fit_network,
    regression_target,
    train_pipeline,
)
from ebdsfilter.exception import InvalidParams, TrainingDiverged, UntrainedIndex
from ebdsfilter.grid import Grid1D
from ebdsfilter.network import SGD, Adam
from ebdsfilter.operators import grid_mass
from ebdsfilter.simulate import ObservationSequence, TimeGrid

TINY = TrainConfig(
    M=2000, batch_size=500, epochs=2, width=8, depth=1, learning_rate=1e-2
)


@pytest.fixture()
def small_pipeline(drifted_bm):
    model, obs, init = drifted_bm
    return train_pipeline(
        model, obs, init, TimeGrid(0.5, 2, 2), TINY, Grid1D(-8.0, 12.0, 300), seed=4
    )


def test_train_config_validation():
    with raises(ValidationError):
        TrainConfig(M=100, batch_size=200)
    with raises(ValidationError):
        TrainConfig(training_init=(0.0, -1.0))
    with raises(ValidationError):
        TrainConfig(unknown=1)
    assert TrainConfig().optimizer.name == OptimizerName.ADAM


def test_optimizer_config_build():
    assert isinstance(OptimizerConfig().build(1e-3), Adam)
    sgd = OptimizerConfig(name="sgd").build(0.5)
    assert isinstance(sgd, SGD) and sgd.learning_rate == 0.5


def test_fit_constant_target():
    gen = np.random.default_rng(0)
    inputs = gen.uniform(-2.0, 2.0, size=(4000, 2))
    targets = np.full(4000, 0.3)
    cfg = TrainConfig(
        M=4000,
        batch_size=256,
        epochs=150,
        width=8,
        depth=1,
        learning_rate=3e-2,
        lr_decay=0.97,
    )
    net = cold_network(inputs, targets, cfg, rngs.stream(0, rngs.INIT))
    split, shuffle = rngs.stream(0, rngs.SPLIT), rngs.stream(0, rngs.SHUFFLE)
    fit_network(net, inputs, targets, cfg, split, shuffle)
    relative = np.abs(net.density(inputs) / 0.3 - 1.0)
    assert np.mean(relative) <= 0.01
    assert np.max(relative) <= 0.05
    history = net.history
    assert history["epochs"] == 150
    assert history["final_validation_loss"] <= 1e-2 * history["initial_validation_loss"]


def test_fit_conditional_mean():
    # E[w | z] = exp(-z^2 / 2) with exponential noise of the same scale
    gen = np.random.default_rng(1)
    M = 50000
    z = gen.uniform(-2.0, 2.0, size=M)
    w = np.exp(-0.5 * z**2) * gen.exponential(1.0, size=M)
    cfg = TrainConfig(
        M=M,
        batch_size=512,
        epochs=40,
        width=16,
        depth=2,
        learning_rate=1e-2,
        lr_decay=0.92,
    )
    inputs = z[:, None]
    net = cold_network(inputs, w, cfg, rngs.stream(1, rngs.INIT))
    split, shuffle = rngs.stream(1, rngs.SPLIT), rngs.stream(1, rngs.SHUFFLE)
    fit_network(net, inputs, w, cfg, split, shuffle)

    centers = np.linspace(-1.9, 1.9, 39)
    gap = np.abs(net.density(centers[:, None]) - np.exp(-0.5 * centers**2))
    assert np.mean(gap) <= 0.03
    assert np.max(gap) <= 0.08


def test_fit_rejects_non_finite_targets():
    gen = np.random.default_rng(2)
    inputs = gen.normal(size=(600, 1))
    targets = np.ones(600)
    targets[5] = np.nan
    cfg = TrainConfig(M=600, batch_size=600, epochs=1, validation_fraction=0.0)
    net = cold_network(inputs, np.ones(600), cfg, rngs.stream(0, rngs.INIT))
    with raises(TrainingDiverged) as exc:
        fit_network(
            net,
            inputs,
            targets,
            cfg,
            rngs.stream(0, rngs.SPLIT),
            rngs.stream(0, rngs.SHUFFLE),
            {"k": 0, "n": 1},
        )
    assert exc.value.payload["k"] == 0
    assert exc.value.payload["epoch"] == 0


def test_train_pipeline_indices(small_pipeline):
    assert set(small_pipeline.networks) == {(0, 1), (0, 2), (1, 1), (1, 2)}
    assert set(small_pipeline.normalizers) == {1}
    assert small_pipeline.normalizers[1]["min"] > 0.0
    assert small_pipeline.seed == 4
    for net in small_pipeline.networks.values():
        assert net.input_dim in (2, 3)
        assert "final_validation_loss" in net.history


def test_train_pipeline_is_deterministic(drifted_bm, small_pipeline):
    model, obs, init = drifted_bm
    again = train_pipeline(
        model, obs, init, TimeGrid(0.5, 2, 2), TINY, Grid1D(-8.0, 12.0, 300), seed=4
    )
    for index, net in small_pipeline.networks.items():
        for a, b in zip(net.weights, again.networks[index].weights):
            assert np.array_equal(a, b)


def test_train_pipeline_resume_and_callback(drifted_bm, small_pipeline):
    model, obs, init = drifted_bm
    seen = []
    resumed = train_pipeline(
        model,
        obs,
        init,
        TimeGrid(0.5, 2, 2),
        TINY,
        Grid1D(-8.0, 12.0, 300),
        seed=4,
        resume={(0, 1): small_pipeline.networks[(0, 1)]},
        callback=lambda pipeline, index: seen.append(index),
    )
    assert seen == [(0, 2), (1, 1), (1, 2)]
    assert resumed.networks[(0, 1)] is small_pipeline.networks[(0, 1)]


def test_initial_closure_is_exact(drifted_bm, small_pipeline):
    _, obs, init = drifted_bm
    y = ObservationSequence(np.array([[0.4, 0.6, 1.1]]))
    x = np.linspace(-3.0, 3.0, 9)[:, None]
    expected = init.value(x) * obs.L(y.column(0), x)
    assert np.allclose(small_pipeline.evaluate(0, 0, x, y), expected)


def test_window_closure_is_normalized(small_pipeline):
    y = ObservationSequence(np.array([[0.4, 0.6, 1.1]]))
    grid = small_pipeline.norm_grid
    values = small_pipeline.evaluate(1, 0, grid.column, y)
    assert grid_mass(values, grid) == pytest.approx(1.0, rel=1e-9)
    assert np.all(values > 0.0)


def test_regression_target_applies_G(drifted_bm, small_pipeline):
    model, obs, init = drifted_bm
    values_y = np.array([[[0.4, 0.6, 1.1]]])
    z = np.linspace(-2.0, 2.0, 5)[:, None]
    value, grad = small_pipeline.density(0, 0, z, values_y)
    tau = small_pipeline.time.tau
    # drifted BM: f0 = 0, f1 = -4
    expected = value - 4.0 * tau * grad[:, 0]
    target = regression_target(small_pipeline, model, 0, 0, z, values_y)
    assert np.allclose(target, expected)


def test_regression_target_is_detached(drifted_bm, small_pipeline):
    model, _, _ = drifted_bm
    values_y = np.array([[[0.4, 0.6, 1.1]]])
    z = np.linspace(-2.0, 2.0, 9)[:, None]
    before = regression_target(small_pipeline, model, 0, 1, z, values_y)
    fitted = small_pipeline.networks[(0, 2)]
    for param in fitted.parameters:
        param += 0.5
    after = regression_target(small_pipeline, model, 0, 1, z, values_y)
    assert np.array_equal(before, after)


def test_trajectory_covers_index_set(small_pipeline):
    y = ObservationSequence(np.array([[0.4, 0.6, 1.1]]))
    out = small_pipeline.trajectory(y, Grid1D(-8.0, 12.0, 50))
    assert set(out) == set(small_pipeline.time.indices())
    assert all(values.shape == (50,) for values in out.values())


def test_evaluate_errors(drifted_bm, small_pipeline):
    y = ObservationSequence(np.array([[0.4, 0.6, 1.1]]))
    x = np.zeros((1, 1))
    with raises(InvalidParams):
        small_pipeline.evaluate(2, 1, x, y)
    with raises(InvalidParams):
        small_pipeline.evaluate(1, 1, x, ObservationSequence(np.array([[0.4]])))
    model, obs, init = drifted_bm
    empty = FilterPipeline(model, obs, init, TimeGrid(0.5, 2, 2), TINY)
    with raises(UntrainedIndex):
        empty.evaluate(0, 1, x, y)
