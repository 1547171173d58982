"""
Error functional and convergence studies.

The error at (k, n) is the root mean square, over evaluation sequences, of the
sup over the grid nodes of |approx - reference|. Densities are compared after
grid normalization unless told otherwise.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ebdsfilter.ebds import FilterPipeline
from ebdsfilter.exception import InvalidParams, StorageError
from ebdsfilter.grid import Grid1D, TimeIndex
from ebdsfilter.model import DiffusionModel, InitialDensity, ObservationModel
from ebdsfilter.operators import normalize_rows
from ebdsfilter.reference import (
    Readout,
    kalman_density,
    kalman_filter_run,
    particle_filter_run,
)
from ebdsfilter.simulate import ObservationSequence, TimeGrid
from ebdsfilter.split_quad import DEFAULT_GH_ORDER, quad_filter_batch

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["k", "n", "t", "error", "N", "seed"]
FLOAT_FORMAT = "%.17g"

Trajectory = Dict[TimeIndex, np.ndarray]


class Evaluator:
    """Something that yields grid densities on every (k, n) for a sequence."""

    name = "evaluator"

    def trajectory(
        self, y: ObservationSequence, grid: Grid1D, time: TimeGrid
    ) -> Trajectory:
        raise NotImplementedError

    def trajectories(
        self, ys: Sequence[ObservationSequence], grid: Grid1D, time: TimeGrid
    ) -> List[Trajectory]:
        return [self.trajectory(y, grid, time) for y in ys]


class QuadEvaluator(Evaluator):
    name = "quadrature"

    def __init__(
        self,
        model: DiffusionModel,
        obs: ObservationModel,
        init: InitialDensity,
        gh_order: int = DEFAULT_GH_ORDER,
        normalized_updates: bool = False,
    ):
        self.model = model
        self.obs = obs
        self.init = init
        self.gh_order = gh_order
        self.normalized_updates = normalized_updates

    def trajectories(self, ys, grid, time):
        run = quad_filter_batch(
            self.model,
            self.obs,
            self.init,
            grid,
            time,
            ys,
            self.gh_order,
            self.normalized_updates,
        )
        return [
            {index: values[s] for index, values in run.items()} for s in range(len(ys))
        ]

    def trajectory(self, y, grid, time):
        return self.trajectories([y], grid, time)[0]


class PipelineEvaluator(Evaluator):
    name = "ebds"

    def __init__(self, pipeline: FilterPipeline):
        self.pipeline = pipeline

    def trajectory(self, y, grid, time):
        if time != self.pipeline.time:
            raise InvalidParams(
                "pipeline was trained on another time grid",
                {"trained": self.pipeline.time.to_dict(), "requested": time.to_dict()},
            )
        return self.pipeline.trajectory(y, grid)


class KalmanEvaluator(Evaluator):
    name = "kalman"

    def __init__(
        self, model: DiffusionModel, obs: ObservationModel, init: InitialDensity
    ):
        self.model = model
        self.obs = obs
        self.init = init

    def trajectory(self, y, grid, time):
        beliefs = kalman_filter_run(self.model, self.obs, self.init, time, y)
        return {index: kalman_density(b, grid).values for index, b in beliefs.items()}


class ParticleEvaluator(Evaluator):
    name = "particle"

    def __init__(
        self,
        model: DiffusionModel,
        obs: ObservationModel,
        init: InitialDensity,
        P: int = 10000,
        substeps: int = 8,
        seed: int = 0,
        bandwidth: Optional[float] = None,
        readout: Readout = Readout.TRANSITION,
    ):
        self.model = model
        self.obs = obs
        self.init = init
        self.P = P
        self.substeps = substeps
        self.seed = seed
        self.bandwidth = bandwidth
        self.readout = readout

    def trajectory(self, y, grid, time):
        return particle_filter_run(
            self.model,
            self.obs,
            self.init,
            time,
            y,
            grid,
            P=self.P,
            substeps=self.substeps,
            seed=self.seed,
            bandwidth=self.bandwidth,
            readout=self.readout,
        )


class FunctionEvaluator(Evaluator):
    """Adapter for a plain (k, n, x, y) -> values callable."""

    name = "function"

    def __init__(
        self, fn: Callable[[int, int, np.ndarray, ObservationSequence], np.ndarray]
    ):
        self.fn = fn

    def trajectory(self, y, grid, time):
        return {
            (k, n): np.asarray(self.fn(k, n, grid.column, y), dtype=float).reshape(-1)
            for k, n in time.indices()
        }


def as_evaluator(obj) -> Evaluator:
    if isinstance(obj, Evaluator):
        return obj
    if isinstance(obj, FilterPipeline):
        return PipelineEvaluator(obj)
    if callable(obj):
        return FunctionEvaluator(obj)
    raise InvalidParams(f"cannot evaluate {type(obj).__name__}")


@dataclass
class ErrorReport:
    per_time: Dict[TimeIndex, float]
    Me: int
    grid: Grid1D
    time: TimeGrid
    seeds: List[Optional[int]] = field(default_factory=list)
    mc_stderr: Dict[TimeIndex, float] = field(default_factory=dict)
    instance_seed: Optional[int] = None

    @property
    def N(self) -> int:
        return self.time.N

    @property
    def final_index(self) -> TimeIndex:
        return (self.time.K, 0)

    @property
    def final_error(self) -> float:
        return self.per_time[self.final_index]

    @property
    def worst_index(self) -> TimeIndex:
        return max(self.per_time, key=lambda index: (self.per_time[index], index))

    def rows(self) -> List[dict]:
        return [
            {
                "k": k,
                "n": n,
                "t": self.time.t(k, n),
                "error": self.per_time[(k, n)],
                "N": self.N,
                "seed": self.instance_seed,
            }
            for k, n in self.time.indices()
        ]


def l2linf_error(
    approx,
    reference,
    sequences: Sequence[ObservationSequence],
    grid: Grid1D,
    time: TimeGrid,
    normalize: bool = True,
    instance_seed: Optional[int] = None,
) -> ErrorReport:
    if not sequences:
        raise InvalidParams("need at least one evaluation sequence")
    approx, reference = as_evaluator(approx), as_evaluator(reference)
    indices = list(time.indices())
    approx_runs = approx.trajectories(sequences, grid, time)
    reference_runs = reference.trajectories(sequences, grid, time)
    sups = np.empty((len(sequences), len(indices)))
    for col, index in enumerate(indices):
        a = np.stack([run[index] for run in approx_runs])
        r = np.stack([run[index] for run in reference_runs])
        if normalize:
            a, _ = normalize_rows(a, grid)
            r, _ = normalize_rows(r, grid)
        sups[:, col] = np.max(np.abs(a - r), axis=1)
    squares = sups**2
    errors = np.sqrt(squares.mean(axis=0))
    if len(sequences) > 1:
        spread = squares.std(axis=0, ddof=1)
    else:
        spread = np.zeros(len(indices))
    with np.errstate(divide="ignore", invalid="ignore"):
        # delta method for sqrt of a sample mean
        stderr = np.where(
            errors > 0, spread / (2.0 * errors * math.sqrt(len(sequences))), 0.0
        )
    report = ErrorReport(
        per_time={index: float(e) for index, e in zip(indices, errors)},
        Me=len(sequences),
        grid=grid,
        time=time,
        seeds=[seq.generating_seed for seq in sequences],
        mc_stderr={index: float(s) for index, s in zip(indices, stderr)},
        instance_seed=instance_seed,
    )
    logger.info(
        "evaluated %s against %s",
        approx.name,
        reference.name,
        extra={"N": time.N, "Me": report.Me, "final_error": report.final_error},
    )
    return report


def fit_slope(N_values: Sequence[int], errors: Sequence[float]):
    """Least squares on (log N, log error); (None, None) with fewer than 2 points."""
    if len(N_values) < 2:
        return None, None
    errs = np.asarray(errors, dtype=float)
    if np.any(~(errs > 0)):
        logger.warning("non-positive errors; no slope fitted", extra={"errors": errs})
        return None, None
    log_N = np.log(np.asarray(N_values, dtype=float))
    slope, intercept = np.polyfit(log_N, np.log(errs), 1)
    return float(slope), float(intercept)


@dataclass
class ConvergenceTable:
    N_values: List[int]
    final_errors: List[float]
    slope: Optional[float]
    intercept: Optional[float]
    instances: List[dict] = field(default_factory=list)
    reports: Dict[int, ErrorReport] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.N_values) != len(self.final_errors):
            raise InvalidParams("N values and errors are not aligned")

    @classmethod
    def from_errors(cls, N_values, final_errors, instances=None) -> "ConvergenceTable":
        slope, intercept = fit_slope(N_values, final_errors)
        return cls(
            list(N_values),
            [float(e) for e in final_errors],
            slope,
            intercept,
            instances or [],
        )

    def aggregate_rows(self) -> List[dict]:
        return [
            {"k": None, "n": None, "t": None, "error": err, "N": N, "seed": None}
            for N, err in zip(self.N_values, self.final_errors)
        ]

    def rows(self) -> List[dict]:
        return self.instances + self.aggregate_rows()

    def to_dict(self) -> dict:
        return {
            "N_values": self.N_values,
            "final_errors": self.final_errors,
            "slope": self.slope,
            "intercept": self.intercept,
        }


def summary_row(report: ErrorReport, final_time_only: bool = True) -> dict:
    index = report.final_index if final_time_only else report.worst_index
    return {
        "k": index[0],
        "n": index[1],
        "t": report.time.t(*index),
        "error": report.per_time[index],
        "N": report.N,
        "seed": report.instance_seed,
    }


def convergence_study(
    builder: Callable[[int], object],
    reference,
    N_values: Sequence[int],
    sequences: Sequence[ObservationSequence],
    grid: Grid1D,
    time: TimeGrid,
    final_time_only: bool = True,
    normalize: bool = True,
    instance_seed: Optional[int] = None,
) -> ConvergenceTable:
    """Evaluate builder(N) for each N on time.with_N(N) and fit the log-log slope."""
    values = list(N_values)
    if values != sorted(values) or len(set(values)) != len(values):
        raise InvalidParams("N values must be strictly ascending", {"N_values": values})
    rows, reports = [], {}
    for N in values:
        report = l2linf_error(
            builder(N),
            reference,
            sequences,
            grid,
            time.with_N(N),
            normalize=normalize,
            instance_seed=instance_seed,
        )
        reports[N] = report
        rows.append(summary_row(report, final_time_only))
    table = ConvergenceTable.from_errors(values, [row["error"] for row in rows], rows)
    table.reports = reports
    logger.info("convergence study done", extra=table.to_dict())
    return table


def combine_instances(tables: Sequence[ConvergenceTable]) -> ConvergenceTable:
    """Mean final error over independent instances, keeping every instance row."""
    if not tables:
        raise InvalidParams("no convergence tables to combine")
    N_values = tables[0].N_values
    if any(t.N_values != N_values for t in tables):
        raise InvalidParams("instances were run on different N values")
    means = np.mean([t.final_errors for t in tables], axis=0)
    instances = [row for t in tables for row in t.instances]
    return ConvergenceTable.from_errors(N_values, means.tolist(), instances)


def emit_error_csv(
    result: Union[ErrorReport, ConvergenceTable, Sequence[ErrorReport]], path: str
) -> str:
    """
    Long-format error rows: one per (k, n) for a report, per (k, n) per
    report for a list, instance plus aggregate rows for a table.
    """
    if isinstance(result, ConvergenceTable):
        if not result.N_values:
            raise InvalidParams("empty convergence table")
        rows = result.rows()
    else:
        reports = [result] if isinstance(result, ErrorReport) else list(result)
        if not reports or any(r.Me < 1 or not r.per_time for r in reports):
            raise InvalidParams("empty error report")
        rows = [row for report in reports for row in report.rows()]
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
    for column in ("k", "n", "N", "seed"):
        frame[column] = frame[column].astype("Int64")
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as exc:
        raise StorageError(f"cannot write {path}", {"file": path}) from exc
    return path


def read_error_csv(path: str) -> Dict[tuple, Dict[TimeIndex, float]]:
    """(N, seed) -> {(k, n): error} for the per-index rows of an error CSV."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"seed": "Int64"})
    except (OSError, pd.errors.ParserError) as exc:
        raise StorageError(f"cannot read {path}", {"file": path}) from exc
    if list(frame.columns) != CSV_COLUMNS:
        raise InvalidParams(
            "unexpected error CSV header", {"columns": list(frame.columns)}
        )
    out: Dict[tuple, Dict[TimeIndex, float]] = {}
    for row in frame.dropna(subset=["k", "n"]).itertuples(index=False):
        seed = None if pd.isna(row.seed) else int(row.seed)
        cell = out.setdefault((int(row.N), seed), {})
        cell[(int(row.k), int(row.n))] = float(row.error)
    return out


def emit_gnuplot(table: ConvergenceTable, path: str) -> str:
    """Two whitespace-separated columns (N, error), one line per N."""
    lines = ["# N error"]
    if table.slope is not None:
        lines.append(f"# slope {table.slope:.17g} intercept {table.intercept:.17g}")
    lines += [f"{N} {err:.17g}" for N, err in zip(table.N_values, table.final_errors)]
    try:
        with open(path, "w", encoding="utf-8") as fileobj:
            fileobj.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}", {"file": path}) from exc
    return path
