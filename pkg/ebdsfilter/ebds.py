"""
Energy-based deep splitting: one energy network per (k, n), trained by
Monte Carlo regression on G applied to the previous approximation, with the
explicit Bayes closure pi(k-1, N) * L(y_k, .) at the start of every window.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from ebdsfilter import rng as rngs
from ebdsfilter.exception import (
    DegenerateDensity,
    InvalidParams,
    TrainingDiverged,
    Unsupported,
    UntrainedIndex,
)
from ebdsfilter.grid import Grid1D, TimeIndex
from ebdsfilter.model import (
    DiffusionModel,
    InitialDensity,
    ObservationModel,
    f_coefficients,
)
from ebdsfilter.network import SGD, Adam, EnergyNetwork, net_eval
from ebdsfilter.operators import MASS_EPSILON, G_values, grid_mass
from ebdsfilter.simulate import (
    ObservationBatch,
    ObservationSequence,
    PathBatch,
    TimeGrid,
    flatten_prefix,
    sample_training_batch,
)

logger = logging.getLogger(__name__)

TINY_TARGET = 1e-300
# rows per forward pass when integrating closures over the grid
EVAL_CHUNK_ROWS = 1 << 18


class OptimizerName(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class OptimizerConfig(BaseModel):
    name: OptimizerName = Field(OptimizerName.ADAM)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    class Config:
        extra = "forbid"

    def build(self, learning_rate: float):
        if self.name == OptimizerName.SGD:
            return SGD(learning_rate)
        return Adam(learning_rate, self.beta1, self.beta2, self.eps)


class TrainConfig(BaseModel):
    M: int = Field(20000, ge=1, description="number of sample pairs (Z^m, Y^m)")
    batch_size: int = Field(1024, ge=1)
    epochs: int = Field(20, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    lr_decay: float = Field(1.0, gt=0.0, le=1.0, description="per-epoch factor")
    optimizer: OptimizerConfig = Field(OptimizerConfig())
    width: int = Field(32, ge=1, description="J, neurons per hidden layer")
    depth: int = Field(2, ge=1, description="number of hidden layers")
    warm_start: bool = Field(True)
    validation_fraction: float = Field(0.1, ge=0.0, lt=0.5)
    normalize_windows: bool = Field(True)
    normalization_points: Optional[int] = Field(None, ge=2)
    training_init: Optional[Tuple[float, float]] = Field(
        None, description="(mean, variance) of a Gaussian q~0 override"
    )
    substeps: int = Field(8, ge=1)
    seed: int = Field(0)

    class Config:
        extra = "forbid"

    @validator("training_init")
    def _positive_variance(cls, value):  # pylint: disable=no-self-argument
        if value is not None and value[1] <= 0:
            raise ValueError("training_init variance must be positive")
        return value

    @root_validator(skip_on_failure=True)
    def _batch_fits(cls, values):  # pylint: disable=no-self-argument
        if values["batch_size"] > values["M"]:
            raise ValueError("batch_size must not exceed M")
        return values


@dataclass
class FilterPipeline:
    model: DiffusionModel
    obs: ObservationModel
    init: InitialDensity
    time: TimeGrid
    config: TrainConfig
    norm_grid: Optional[Grid1D] = None
    networks: Dict[TimeIndex, EnergyNetwork] = field(default_factory=dict)
    normalizers: Dict[int, dict] = field(default_factory=dict)
    model_name: str = "custom"
    seed: int = 0

    @property
    def normalizing(self) -> bool:
        return self.config.normalize_windows and self.norm_grid is not None

    def network(self, k: int, n: int) -> EnergyNetwork:
        try:
            return self.networks[(k, n)]
        except KeyError as exc:
            raise UntrainedIndex(
                f"no trained network for index ({k}, {n})", {"k": k, "n": n}
            ) from exc

    def _check_index(self, k: int, n: int):
        valid = (0 <= k < self.time.K and 0 <= n <= self.time.N) or (
            k == self.time.K and n == 0
        )
        if not valid:
            raise InvalidParams(
                f"({k}, {n}) is outside the index set",
                {"k": k, "n": n, "K": self.time.K, "N": self.time.N},
            )

    def window_masses(self, k: int, values_y: np.ndarray) -> np.ndarray:
        """Grid mass of the unnormalized closure at (k, 0), one per sequence."""
        rows = np.asarray(values_y, dtype=float)
        if k == 0 or not self.normalizing:
            return np.ones(rows.shape[0])
        grid = self.norm_grid
        net = self.network(k - 1, self.time.N)
        nodes = grid.column
        prefixes = flatten_prefix(rows, k - 1)
        per_chunk = max(1, EVAL_CHUNK_ROWS // grid.points)
        masses = np.empty(rows.shape[0])
        for start in range(0, rows.shape[0], per_chunk):
            stop = min(start + per_chunk, rows.shape[0])
            count = stop - start
            x = np.tile(nodes, (count, 1))
            prefix_rows = np.repeat(prefixes[start:stop], grid.points, axis=0)
            inputs = np.hstack([x, prefix_rows])
            y_k = np.repeat(rows[start:stop, :, k], grid.points, axis=0)
            values = net.density(inputs) * self.obs.L(y_k, x)
            masses[start:stop] = grid_mass(values.reshape(count, grid.points), grid)
        if np.any(~(masses > MASS_EPSILON)):
            raise DegenerateDensity(
                "closure mass vanished during normalization",
                {"k": k, "count": int(np.sum(~(masses > MASS_EPSILON)))},
            )
        return masses

    def closure(
        self, k: int, x, values_y: np.ndarray, masses: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """pi(k, 0): q0 L(y_0) for k = 0, else pi(k-1, N) L(y_k) / mass."""
        pts = np.asarray(x, dtype=float).reshape(-1, self.model.d)
        rows = _broadcast_rows(values_y, pts.shape[0])
        y_k = rows[:, :, k]
        lik = self.obs.L(y_k, pts)
        lik_grad = self.obs.grad_L(y_k, pts)
        if k == 0:
            prior, prior_grad = self.init.value(pts), self.init.grad(pts)
        else:
            prior, prior_grad = net_eval(
                self.network(k - 1, self.time.N), pts, flatten_prefix(rows, k - 1)
            )
        value = prior * lik
        grad = prior_grad * lik[:, None] + prior[:, None] * lik_grad
        if k > 0 and self.normalizing:
            if masses is None:
                masses = self.window_masses(k, rows)
            value = value / masses
            grad = grad / masses[:, None]
        return value, grad

    def density(
        self,
        k: int,
        n: int,
        x,
        values_y: np.ndarray,
        masses: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Value and x-gradient of pi(k, n) at a batch of states."""
        self._check_index(k, n)
        if n == 0:
            return self.closure(k, x, values_y, masses)
        pts = np.asarray(x, dtype=float).reshape(-1, self.model.d)
        rows = _broadcast_rows(values_y, pts.shape[0])
        return net_eval(self.network(k, n), pts, flatten_prefix(rows, k))

    def evaluate(self, k: int, n: int, x, y: ObservationSequence) -> np.ndarray:
        self._check_index(k, n)
        if y.K < k:
            raise InvalidParams(
                "observation sequence too short for the requested index",
                {"k": k, "columns": y.K + 1},
            )
        rows = y.values[None]
        masses = None
        if n == 0:
            masses = self.window_masses(k, rows)
        pts = np.asarray(x, dtype=float).reshape(-1, self.model.d)
        if masses is not None:
            masses = np.full(pts.shape[0], masses[0])
        return self.density(k, n, pts, rows, masses)[0]

    def trajectory(
        self, y: ObservationSequence, grid: Grid1D
    ) -> Dict[TimeIndex, np.ndarray]:
        """All (k, n) densities for one sequence on the grid nodes."""
        out = {}
        for k, n in self.time.indices():
            out[(k, n)] = self.evaluate(k, n, grid.column, y)
        return out


def _broadcast_rows(values_y: np.ndarray, count: int) -> np.ndarray:
    rows = np.asarray(values_y, dtype=float)
    if rows.ndim == 2:
        rows = rows[None]
    if rows.shape[0] == 1 and count > 1:
        rows = np.broadcast_to(rows, (count,) + rows.shape[1:])
    return rows


def pipeline_eval(
    pipeline: FilterPipeline, k: int, n: int, x, y: ObservationSequence
) -> np.ndarray:
    return pipeline.evaluate(k, n, x, y)


def regression_target(
    pipeline: FilterPipeline,
    model: DiffusionModel,
    k: int,
    n: int,
    z_next,
    values_y: np.ndarray,
    masses: Optional[np.ndarray] = None,
) -> np.ndarray:
    """G pi(k, n) at z_next; plain arrays, so nothing flows back into pi(k, n)."""
    pts = np.asarray(z_next, dtype=float).reshape(-1, model.d)
    value, grad = pipeline.density(k, n, pts, values_y, masses)
    f0, f1 = f_coefficients(model, pts)
    return G_values(f0, f1, value, grad, pipeline.time.tau)


def _loss(net: EnergyNetwork, inputs: np.ndarray, targets: np.ndarray) -> float:
    if inputs.shape[0] == 0:
        return float("nan")
    return float(np.mean((net.density(inputs) - targets) ** 2))


def cold_network(
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    gen: np.random.Generator,
    state_dim: int = 1,
) -> EnergyNetwork:
    """Fresh network with standardised inputs and exp(-bias) at the mean target."""
    net = EnergyNetwork.initialize(
        inputs.shape[1], cfg.width, cfg.depth, gen, state_dim
    )
    net.fit_input_scaling(inputs)
    mean_target = float(np.mean(np.maximum(targets, 0.0)))
    net.biases[-1][:] = -np.log(max(mean_target, TINY_TARGET))
    return net


def fit_network(
    net: EnergyNetwork,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    split: np.random.Generator,
    shuffle: np.random.Generator,
    context: Optional[dict] = None,
) -> EnergyNetwork:
    """
    Minibatch minimisation of mean |exp(-f(inputs)) - targets|^2, in place.
    A validation_fraction share of the rows is held out and only scored.
    """
    context = dict(context or {})
    order = split.permutation(inputs.shape[0])
    n_val = int(cfg.validation_fraction * inputs.shape[0])
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_val, t_val = inputs[val_idx], targets[val_idx]
    initial_loss = _loss(net, x_val, t_val)

    optimizer = cfg.optimizer.build(cfg.learning_rate)
    step = 0
    loss = float("nan")
    for epoch in range(cfg.epochs):
        optimizer.learning_rate = cfg.learning_rate * cfg.lr_decay**epoch
        perm = train_idx[shuffle.permutation(train_idx.size)]
        for start in range(0, perm.size, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            energy, activations = net.forward(inputs[idx])
            dens = np.exp(-energy)
            resid = dens - targets[idx]
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    "non-finite loss during training",
                    {**context, "epoch": epoch, "step": step, "loss": loss},
                )
            dweights, dbiases = net.backward(
                activations, -2.0 * resid * dens / idx.size
            )
            optimizer.step(net.parameters, dweights + dbiases)
            step += 1
        logger.debug("epoch done", extra={**context, "epoch": epoch, "loss": loss})

    net.history = {
        "epochs": cfg.epochs,
        "steps": step,
        "train_loss": loss,
        "initial_validation_loss": initial_loss,
        "final_validation_loss": _loss(net, x_val, t_val),
    }
    return net


def train_step_network(
    pipeline: FilterPipeline,
    batch: Tuple[PathBatch, ObservationBatch],
    k: int,
    n: int,
    cfg: Optional[TrainConfig] = None,
    masses: Optional[np.ndarray] = None,
) -> EnergyNetwork:
    """
    Fit the network for index (k, n+1) by minibatch regression of
    exp(-f(Z_{N-n-1}, Y_{0:k})) onto G pi(k, n)(Z_{N-n}).
    """
    cfg = cfg or pipeline.config
    paths, observations = batch
    N = pipeline.time.N
    states = paths.states
    inputs = np.hstack([states[:, N - (n + 1)], observations.prefix(k)])
    targets = regression_target(
        pipeline, pipeline.model, k, n, states[:, N - n], observations.values, masses
    )
    context = {"k": k, "n": n + 1}
    if not np.all(np.isfinite(targets)):
        raise TrainingDiverged(
            "regression targets are not finite", {**context, "stage": "targets"}
        )
    seed = pipeline.seed
    previous = pipeline.networks.get((k, n))
    if cfg.warm_start and n >= 1 and previous is not None:
        net = previous.copy()
    else:
        net = cold_network(
            inputs, targets, cfg, rngs.stream(seed, rngs.INIT, k, n), pipeline.model.d
        )
    fit_network(
        net,
        inputs,
        targets,
        cfg,
        rngs.stream(seed, rngs.SPLIT, k, n),
        rngs.stream(seed, rngs.SHUFFLE, k, n),
        context,
    )
    logger.info(
        "trained network",
        extra={
            **context,
            "loss": net.history["train_loss"],
            "validation_loss": net.history["final_validation_loss"],
        },
    )
    return net


def train_pipeline(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    grid_time: TimeGrid,
    cfg: TrainConfig,
    eval_grid: Optional[Grid1D],
    seed: Optional[int] = None,
    model_name: str = "custom",
    resume: Optional[Dict[TimeIndex, EnergyNetwork]] = None,
    callback: Optional[Callable[[FilterPipeline, TimeIndex], None]] = None,
) -> FilterPipeline:
    """
    Train pi(k, n) for k < K and 1 <= n <= N on a single training batch.
    Networks passed through ``resume`` are kept and their indices skipped.
    """
    seed = cfg.seed if seed is None else seed
    if cfg.normalize_windows and eval_grid is not None and model.d != 1:
        raise Unsupported("grid normalization is one-dimensional", {"d": model.d})
    pipeline = FilterPipeline(
        model=model,
        obs=obs,
        init=init,
        time=grid_time,
        config=cfg,
        norm_grid=eval_grid.coarsen(cfg.normalization_points) if eval_grid else None,
        networks=dict(resume or {}),
        model_name=model_name,
        seed=seed,
    )
    batch = sample_training_batch(
        model, obs, init, grid_time, cfg.M, seed, substeps=cfg.substeps
    )
    for k in range(grid_time.K):
        masses = None
        if k > 0 and pipeline.normalizing:
            masses = pipeline.window_masses(k, batch[1].values)
            pipeline.normalizers[k] = {
                "mean": float(np.mean(masses)),
                "min": float(np.min(masses)),
                "max": float(np.max(masses)),
            }
            logger.info(
                "normalized window closure",
                extra={"k": k, **pipeline.normalizers[k]},
            )
        for n in range(grid_time.N):
            if (k, n + 1) in pipeline.networks:
                logger.info("skipping trained network", extra={"k": k, "n": n + 1})
                continue
            pipeline.networks[(k, n + 1)] = train_step_network(
                pipeline, batch, k, n, cfg, masses
            )
            if callback is not None:
                callback(pipeline, (k, n + 1))
    return pipeline
