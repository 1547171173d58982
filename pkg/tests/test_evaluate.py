import numpy as np
import pandas as pd
import pytest
from pytest import raises
from scipy.stats import norm

from ebdsfilter.ebds import FilterPipeline, TrainConfig
from ebdsfilter.evaluate import (
    CSV_COLUMNS,
    ConvergenceTable,
    FunctionEvaluator,
    KalmanEvaluator,
    PipelineEvaluator,
    QuadEvaluator,
    as_evaluator,
    combine_instances,
    convergence_study,
    emit_error_csv,
    emit_gnuplot,
    fit_slope,
    l2linf_error,
    read_error_csv,
    summary_row,
)
from ebdsfilter.exception import InvalidParams
from ebdsfilter.grid import Grid1D
from ebdsfilter.model import builtin_drifted_bm
from ebdsfilter.simulate import (
    ObservationSequence,
    TimeGrid,
    sample_observation_sequences,
)

GRID = Grid1D(-5.0, 5.0, 101)
TIME = TimeGrid(1.0, 2, 2)


def gaussian(shift):
    return lambda k, n, x, y: norm.pdf(x[:, 0], loc=shift)


def sequences(count=3):
    gen = np.random.default_rng(0)
    return [ObservationSequence(gen.normal(size=(1, 3)), 9) for _ in range(count)]


def test_identical_evaluators_have_zero_error():
    report = l2linf_error(gaussian(0.0), gaussian(0.0), sequences(), GRID, TIME)
    assert set(report.per_time) == set(TIME.indices())
    assert all(e == 0.0 for e in report.per_time.values())
    assert report.Me == 3 and report.seeds == [9, 9, 9]


def test_error_is_rms_of_sup():
    report = l2linf_error(
        gaussian(0.5),
        gaussian(0.0),
        sequences(),
        GRID,
        TIME,
        normalize=False,
        instance_seed=4,
    )
    expected = np.max(np.abs(norm.pdf(GRID.nodes, loc=0.5) - norm.pdf(GRID.nodes)))
    assert report.final_error == pytest.approx(expected)
    assert report.mc_stderr[(2, 0)] == pytest.approx(0.0)
    rows = report.rows()
    assert len(rows) == 7
    assert rows[-1] == {
        "k": 2,
        "n": 0,
        "t": 1.0,
        "error": report.final_error,
        "N": 2,
        "seed": 4,
    }


@pytest.mark.parametrize("scale", [-3.0, 0.5, 2.0])
def test_error_scales_with_the_difference(scale):
    def bump(k, n, x, y):
        return (1.0 + y.values[0, k]) * np.sin(x[:, 0] + n) * np.exp(-x[:, 0] ** 2)

    def shifted(factor):
        return lambda k, n, x, y: norm.pdf(x[:, 0]) + factor * bump(k, n, x, y)

    args = (sequences(), GRID, TIME)
    unit = l2linf_error(shifted(1.0), gaussian(0.0), *args, normalize=False)
    scaled = l2linf_error(shifted(scale), gaussian(0.0), *args, normalize=False)
    for index, error in unit.per_time.items():
        assert scaled.per_time[index] == pytest.approx(abs(scale) * error, rel=1e-9)


def test_error_is_stable_in_the_number_of_sequences(drifted_bm):
    model, obs, init = drifted_bm
    grid = Grid1D(-8.0, 12.0, 400)
    time = TimeGrid(0.5, 2, 4)
    ys = sample_observation_sequences(model, obs, init, time, 400, seed=77)
    oracle, kalman = QuadEvaluator(model, obs, init), KalmanEvaluator(model, obs, init)
    few = l2linf_error(oracle, kalman, ys[:100], grid, time)
    many = l2linf_error(oracle, kalman, ys, grid, time)
    assert few.Me == 100 and many.Me == 400
    for index, error in many.per_time.items():
        # (0, 0) is exact up to rounding on both sides
        bound = 2.0 * few.mc_stderr[index] + 1e-12
        assert abs(few.per_time[index] - error) <= bound


def test_normalization_removes_mass_defects():
    half = lambda k, n, x, y: 0.5 * norm.pdf(x[:, 0])
    normalized = l2linf_error(half, gaussian(0.0), sequences(), GRID, TIME)
    assert normalized.final_error == pytest.approx(0.0, abs=1e-12)
    raw = l2linf_error(half, gaussian(0.0), sequences(), GRID, TIME, normalize=False)
    assert raw.final_error == pytest.approx(0.5 * norm.pdf(0.0))


def test_worst_index_and_summary():
    def drifting(k, n, x, y):
        return norm.pdf(x[:, 0], loc=0.1 * (k * 3 + n))

    report = l2linf_error(drifting, gaussian(0.0), sequences(), GRID, TIME)
    assert report.worst_index == (2, 0)
    assert summary_row(report, final_time_only=False)["k"] == 2
    assert summary_row(report)["error"] == report.final_error


def test_as_evaluator():
    assert isinstance(as_evaluator(gaussian(0.0)), FunctionEvaluator)
    with raises(InvalidParams):
        as_evaluator(3)
    with raises(InvalidParams):
        l2linf_error(gaussian(0.0), gaussian(0.0), [], GRID, TIME)


def test_fit_slope():
    Ns = [1, 2, 4, 8, 16]
    slope, intercept = fit_slope(Ns, [3.0 / N for N in Ns])
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert intercept == pytest.approx(np.log(3.0))
    assert fit_slope([4], [0.1]) == (None, None)
    assert fit_slope([1, 2], [0.1, 0.0]) == (None, None)


def test_convergence_table_and_instances():
    first = ConvergenceTable.from_errors([1, 2], [1.0, 0.5])
    second = ConvergenceTable.from_errors([1, 2], [3.0, 1.5])
    combined = combine_instances([first, second])
    assert combined.final_errors == [2.0, 1.0]
    assert combined.slope == pytest.approx(-1.0)
    with raises(InvalidParams):
        combine_instances([first, ConvergenceTable.from_errors([1, 4], [1.0, 0.5])])
    with raises(InvalidParams):
        ConvergenceTable([1, 2], [1.0], None, None)


def test_convergence_study_requires_ascending():
    with raises(InvalidParams):
        convergence_study(
            lambda N: gaussian(0.0), gaussian(0.0), [4, 2], sequences(), GRID, TIME
        )


def test_error_csv_roundtrip(tmp_path):
    reports = [
        l2linf_error(
            gaussian(0.1 * s), gaussian(0.0), sequences(), GRID, TIME, instance_seed=s
        )
        for s in (0, 1)
    ]
    path = emit_error_csv(reports, str(tmp_path / "errors.csv"))
    frame = pd.read_csv(path)
    assert list(frame.columns) == CSV_COLUMNS
    loaded = read_error_csv(path)
    assert set(loaded) == {(2, 0), (2, 1)}
    assert loaded[(2, 1)] == reports[1].per_time


def test_table_csv_has_aggregate_rows(tmp_path):
    table = ConvergenceTable.from_errors(
        [1, 2],
        [1.0, 0.5],
        [{"k": 2, "n": 0, "t": 1.0, "error": 1.0, "N": 1, "seed": 3}],
    )
    path = emit_error_csv(table, str(tmp_path / "convergence.csv"))
    frame = pd.read_csv(path)
    assert len(frame) == 3
    assert frame["k"].isna().sum() == 2
    assert read_error_csv(path) == {(1, 3): {(2, 0): 1.0}}


def test_error_csv_rejects_empty(tmp_path):
    with raises(InvalidParams):
        emit_error_csv([], str(tmp_path / "x.csv"))
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with raises(InvalidParams):
        read_error_csv(str(bad))


def test_gnuplot(tmp_path):
    path = emit_gnuplot(
        ConvergenceTable.from_errors([2, 4], [0.5, 0.25]), str(tmp_path / "c.dat")
    )
    with open(path, encoding="utf-8") as fileobj:
        lines = fileobj.read().splitlines()
    assert lines[0] == "# N error"
    assert lines[1].startswith("# slope ")
    assert lines[2:] == ["2 0.5", "4 0.25"]
    table = ConvergenceTable.from_errors([2], [0.5])
    single = emit_gnuplot(table, str(tmp_path / "s.dat"))
    with open(single, encoding="utf-8") as fileobj:
        assert fileobj.read() == "# N error\n2 0.5\n"


def test_pipeline_evaluator_checks_time(drifted_bm):
    model, obs, init = drifted_bm
    pipeline = FilterPipeline(model, obs, init, TimeGrid(1.0, 2, 2), TrainConfig())
    with raises(InvalidParams):
        PipelineEvaluator(pipeline).trajectory(
            sequences(1)[0], GRID, TimeGrid(1.0, 2, 4)
        )


@pytest.fixture(scope="module")
def oracle_study():
    model, obs, init = builtin_drifted_bm()
    grid = Grid1D(-8.0, 12.0, 2000)
    time = TimeGrid(2.0, 20, 16)
    ys = sample_observation_sequences(model, obs, init, time, 30, seed=1000)
    return convergence_study(
        lambda N: QuadEvaluator(model, obs, init),
        KalmanEvaluator(model, obs, init),
        [2, 4, 8, 16, 32],
        ys,
        grid,
        time,
        instance_seed=None,
    )


def test_oracle_filter_is_accurate(oracle_study):
    assert max(oracle_study.reports[16].per_time.values()) <= 0.08


def test_oracle_filter_converges_with_order_one(oracle_study):
    errors = oracle_study.final_errors
    assert all(a > b for a, b in zip(errors, errors[1:]))
    # N = 2, 4 sit before the asymptotic range
    slope, _ = fit_slope(oracle_study.N_values[2:], errors[2:])
    assert -1.3 <= slope <= -0.8
