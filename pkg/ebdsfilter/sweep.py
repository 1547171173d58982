"""
Convergence sweeps over (N, seed) cells.

Cells are independent: each rebuilds its models from the resolved run config,
so they can run in worker processes (``EBDS_WORKERS``). Results are merged by
key, never by completion order.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ebdsfilter.config import GCONFIG
from ebdsfilter.ebds import train_pipeline
from ebdsfilter.evaluate import (
    ConvergenceTable,
    ErrorReport,
    Evaluator,
    KalmanEvaluator,
    ParticleEvaluator,
    PipelineEvaluator,
    QuadEvaluator,
    combine_instances,
    l2linf_error,
    summary_row,
)
from ebdsfilter.exception import EbdsException
from ebdsfilter.model import ModelBundle
from ebdsfilter.runconfig import ConvergeMethod, ReferenceKind, RunConfig
from ebdsfilter.simulate import (
    ObservationSequence,
    TimeGrid,
    sample_observation_sequences,
)

logger = logging.getLogger(__name__)

Cell = Tuple[int, Optional[int]]


def build_reference(cfg: RunConfig, bundle: ModelBundle) -> Evaluator:
    """Kalman when the model allows it (auto), else the particle filter."""
    model, obs, init = bundle
    kind = cfg.evaluation.reference
    if kind == ReferenceKind.AUTO:
        linear = model.affine is not None and obs.linear is not None and init.gaussian
        kind = ReferenceKind.KALMAN if linear else ReferenceKind.PARTICLE
    if kind == ReferenceKind.KALMAN:
        return KalmanEvaluator(model, obs, init)
    if kind == ReferenceKind.QUADRATURE:
        return QuadEvaluator(
            model, obs, init, cfg.gh_order, cfg.oracle.normalized_updates
        )
    return ParticleEvaluator(
        model,
        obs,
        init,
        P=cfg.evaluation.particles,
        substeps=cfg.evaluation.substeps,
        seed=cfg.evaluation.seed,
        bandwidth=cfg.evaluation.bandwidth,
        readout=cfg.evaluation.readout,
    )


def evaluation_sequences(
    cfg: RunConfig, bundle: ModelBundle, time: Optional[TimeGrid] = None
) -> List[ObservationSequence]:
    model, obs, init = bundle
    return sample_observation_sequences(
        model,
        obs,
        init,
        time or cfg.time_grid(),
        cfg.evaluation.Me,
        substeps=cfg.evaluation.substeps,
        seed=cfg.evaluation.seed,
    )


def build_approx(
    cfg: RunConfig, bundle: ModelBundle, N: int, seed: Optional[int]
) -> Evaluator:
    model, obs, init = bundle
    if cfg.converge.method == ConvergeMethod.ORACLE:
        return QuadEvaluator(
            model, obs, init, cfg.gh_order, cfg.oracle.normalized_updates
        )
    pipeline = train_pipeline(
        model,
        obs,
        init,
        cfg.time_grid(N),
        cfg.train,
        cfg.eval_grid(),
        seed=seed,
        model_name=cfg.model,
    )
    return PipelineEvaluator(pipeline)


def run_cell(
    resolved: dict, N: int, seed: Optional[int], values: np.ndarray
) -> ErrorReport:
    """One (N, seed) cell; ``values`` holds the (Me, d', K+1) evaluation sequences."""
    cfg = RunConfig.parse_obj(resolved)
    bundle = cfg.bundle()
    sequences = [ObservationSequence(v, cfg.evaluation.seed) for v in values]
    try:
        return l2linf_error(
            build_approx(cfg, bundle, N, seed),
            build_reference(cfg, bundle),
            sequences,
            cfg.eval_grid(),
            cfg.time_grid(N),
            normalize=cfg.evaluation.normalize,
            instance_seed=seed,
        )
    except EbdsException as exc:
        exc.payload.update({"N": N, "seed": seed})
        raise


def sweep_cells(cfg: RunConfig) -> List[Cell]:
    # the oracle is deterministic given the sequences; one instance suffices
    seeds = [None] if cfg.converge.method == ConvergeMethod.ORACLE else list(cfg.seeds)
    return [(N, seed) for seed in seeds for N in cfg.converge.N_values]


def run_sweep(
    cfg: RunConfig,
    sequences: Sequence[ObservationSequence],
    workers: Optional[int] = None,
) -> Dict[Cell, ErrorReport]:
    workers = GCONFIG.workers if workers is None else max(1, workers)
    cells = sweep_cells(cfg)
    resolved = cfg.resolved()
    values = np.stack([seq.values for seq in sequences])
    logger.info("running sweep", extra={"cells": len(cells), "workers": workers})
    if workers == 1:
        reports = [run_cell(resolved, N, seed, values) for N, seed in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_cell, resolved, N, seed, values) for N, seed in cells
            ]
            reports = [future.result() for future in futures]
    return dict(zip(cells, reports))


def tabulate(cfg: RunConfig, reports: Dict[Cell, ErrorReport]) -> ConvergenceTable:
    """Per-seed convergence tables averaged into one, instance rows kept."""
    tables = []
    seeds = sorted({seed for _, seed in reports}, key=lambda s: (s is not None, s))
    for seed in seeds:
        rows = [
            summary_row(reports[(N, seed)], cfg.converge.final_time_only)
            for N in cfg.converge.N_values
        ]
        tables.append(
            ConvergenceTable.from_errors(
                cfg.converge.N_values, [row["error"] for row in rows], rows
            )
        )
    return combine_instances(tables)
