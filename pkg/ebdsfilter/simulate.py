"""
Euler-Maruyama sampling of training paths, true states and observations.
"""

import logging
from collections import abc
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ebdsfilter import rng as rngs
from ebdsfilter.exception import InvalidParams, SimulationDiverged
from ebdsfilter.grid import TimeIndex
from ebdsfilter.model import DiffusionModel, InitialDensity, ObservationModel, as_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int
    N: int

    def __post_init__(self):
        if self.T <= 0 or self.K < 1 or self.N < 1:
            raise InvalidParams(
                "time grid needs T > 0, K >= 1 and N >= 1",
                {"T": self.T, "K": self.K, "N": self.N},
            )
        if self.tau > 1.0:
            logger.warning("time step tau=%g exceeds 1", self.tau)

    @property
    def tau(self) -> float:
        return self.T / (self.K * self.N)

    @property
    def window(self) -> float:
        return self.T / self.K

    def t(self, k: int, n: int) -> float:
        if k == self.K and n == 0:
            return float(self.T)
        return (k * self.N + n) * self.tau

    def indices(self) -> Iterator[TimeIndex]:
        """The index set: (k, n) for k < K, 0 <= n <= N, then (K, 0)."""
        for k in range(self.K):
            for n in range(self.N + 1):
                yield (k, n)
        yield (self.K, 0)

    def with_N(self, N: int) -> "TimeGrid":
        return TimeGrid(self.T, self.K, N)

    def to_dict(self) -> dict:
        return {"T": self.T, "K": self.K, "N": self.N}


@dataclass(frozen=True)
class PathBatch:
    states: np.ndarray  # (M, N+1, d)
    seed: int
    grid: TimeGrid

    @property
    def M(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class ObservationSequence:
    values: np.ndarray  # (d', K+1)
    generating_seed: Optional[int] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[None, :]
        if not np.all(np.isfinite(vals)):
            raise InvalidParams("observation sequence has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def K(self) -> int:
        return self.values.shape[1] - 1

    @property
    def d_prime(self) -> int:
        return self.values.shape[0]

    def column(self, k: int) -> np.ndarray:
        return self.values[:, k]


@dataclass(frozen=True)
class ObservationBatch(abc.Sequence):
    """M observation sequences stored as one (M, d', K+1) array."""

    values: np.ndarray
    seed: Optional[int] = None
    substeps: int = field(default=1)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        return ObservationSequence(self.values[index], self.seed)

    @classmethod
    def from_sequences(
        cls, sequences: Sequence[ObservationSequence]
    ) -> "ObservationBatch":
        if isinstance(sequences, ObservationBatch):
            return sequences
        return cls(np.stack([seq.values for seq in sequences]))

    def prefix(self, k: int) -> np.ndarray:
        """Y_{0:k} flattened time-major to (M, d' (k+1))."""
        return flatten_prefix(self.values, k)


def flatten_prefix(values: np.ndarray, k: int) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 2:
        vals = vals[None]
    return np.ascontiguousarray(
        np.transpose(vals[:, :, : k + 1], (0, 2, 1))
    ).reshape(vals.shape[0], -1)


def em_step(model: DiffusionModel, z, tau: float, dw) -> np.ndarray:
    """z + mu(z) tau + sigma(z) dw, for a batch of states."""
    if tau <= 0:
        raise InvalidParams("tau must be positive", {"tau": tau})
    pts = as_points(z, model.d)
    inc = np.asarray(dw, dtype=float).reshape(pts.shape[0], -1)
    out = pts + model.mu(pts) * tau + np.einsum("bij,bj->bi", model.sigma(pts), inc)
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged(
            "Euler-Maruyama step produced non-finite states",
            {"model": model.name, "tau": tau},
        )
    return out


def _noise_dim(model: DiffusionModel) -> int:
    return model.sigma(np.zeros((1, model.d))).shape[-1]


def sample_em_paths(
    model: DiffusionModel,
    init: InitialDensity,
    grid: TimeGrid,
    M: int,
    seed: int,
    chunk_size: int = rngs.CHUNK_SIZE,
) -> PathBatch:
    """
    M paths Z_{0:N} over the first observation window, Z_0 ~ init. The same
    batch serves every window k. Increments of path m come from its own keyed
    stream, so the batch does not depend on ``chunk_size``.
    """
    if M < 1:
        raise InvalidParams("need at least one path", {"M": M})
    tau = grid.tau
    m = _noise_dim(model)
    states = np.empty((M, grid.N + 1, model.d))
    states[:, 0] = init.sample(rngs.stream(seed, rngs.STARTS), M)
    noise = rngs.KeyedStream(seed, rngs.PATHS)
    for _, start, stop in rngs.chunks(M, chunk_size):
        ids = np.arange(start, stop)
        z = states[start:stop, 0]
        for n in range(grid.N):
            z = em_step(model, z, tau, noise.normals(ids, n, m) * np.sqrt(tau))
            states[start:stop, n + 1] = z
    return PathBatch(states=states, seed=seed, grid=grid)


def _simulate_observations(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    grid: TimeGrid,
    count: int,
    substeps: int,
    seed: int,
    purpose: int,
) -> np.ndarray:
    if substeps < 1:
        raise InvalidParams("substeps must be >= 1", {"substeps": substeps})
    if count < 1:
        raise InvalidParams("need at least one sequence", {"count": count})
    dt = grid.tau / substeps
    fine_steps = grid.N * substeps
    m = _noise_dim(model)
    values = np.empty((count, obs.d_prime, grid.K + 1))
    for chunk, start, stop in rngs.chunks(count):
        gen = rngs.stream(seed, purpose, chunk)
        size = stop - start
        state = init.sample(gen, size)
        values[start:stop, :, 0] = obs.sample(state, gen)
        for k in range(1, grid.K + 1):
            incs = gen.standard_normal((size, fine_steps, m)) * np.sqrt(dt)
            for step in range(fine_steps):
                state = em_step(model, state, dt, incs[:, step])
            values[start:stop, :, k] = obs.sample(state, gen)
    return values


def sample_observation_sequences(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    grid: TimeGrid,
    count: int,
    substeps: int = 8,
    seed: int = 0,
) -> List[ObservationSequence]:
    """
    Simulate the true state S (Euler-Maruyama, step tau/substeps, S_0 ~ q0)
    and emit O_k ~ g(.|S_{t_k}) for k = 0..K.
    """
    values = _simulate_observations(
        model, obs, init, grid, count, substeps, seed, rngs.OBSERVATIONS
    )
    return [ObservationSequence(v, seed) for v in values]


def sample_training_batch(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    grid: TimeGrid,
    M: int,
    seed: int,
    substeps: int = 8,
) -> Tuple[PathBatch, ObservationBatch]:
    """
    M independent pairs (Z^m, Y^m); paths and observations come from separate
    streams, so Z^m is independent of Y^m.
    """
    paths = sample_em_paths(model, init.training_density, grid, M, seed)
    values = _simulate_observations(
        model, obs, init, grid, M, substeps, seed, rngs.TRAINING
    )
    logger.info(
        "sampled training batch",
        extra={"M": M, "seed": seed, "N": grid.N, "K": grid.K},
    )
    return paths, ObservationBatch(values, seed=seed, substeps=substeps)
