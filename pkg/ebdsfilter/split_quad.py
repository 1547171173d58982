"""
Grid realisation of the Euler-Maruyama splitting recursion.

One predict step maps grid values v to

    v'(x_i) = sum_q w_q [G v](x_i + mu(x_i) tau + sigma(x_i) sqrt(tau) xi_q)

with Gauss-Hermite nodes xi_q. Gaussian integration by parts moves the
first-order part of G onto the node weights. With s = sigma(x_i) sqrt(tau) and
f1' = 2 f0 in one dimension,

    E[(v + tau (f0 v + f1 v'))(Z)] = E[v(Z) (1 - tau f0(Z) + tau f1(Z) xi / s)]

so the step only reads values of v off the nodes. They come from linear
interpolation and are zero outside the grid. No grid derivative enters, so the
absolute row sums do not depend on the grid spacing. Since the map is linear
in v it is assembled once per (model, grid, tau) as a sparse matrix.
"""

import logging
from typing import Dict, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import sparse

from ebdsfilter.exception import DegenerateDensity, InvalidParams, Unsupported
from ebdsfilter.grid import Grid1D, GridDensity, TimeIndex
from ebdsfilter.model import (
    DiffusionModel,
    InitialDensity,
    ObservationModel,
    f_coefficients,
    unit_likelihood,
)
from ebdsfilter.operators import MASS_EPSILON, grid_mass, normalize_rows
from ebdsfilter.simulate import ObservationBatch, ObservationSequence, TimeGrid

logger = logging.getLogger(__name__)

DEFAULT_GH_ORDER = 21
MIN_GH_ORDER = 5
NEGATIVE_TOLERANCE = 1e-12
BOUNDARY_MASS_TOLERANCE = 1e-8


def gauss_hermite(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[phi(xi)], xi ~ N(0, 1)."""
    nodes, weights = hermegauss(order)
    return nodes, weights / weights.sum()


def _interpolation_matrix(points: np.ndarray, grid: Grid1D) -> sparse.csr_matrix:
    """Rows: query points; linear interpolation weights, zero outside the grid."""
    pos = (points - grid.lower) / grid.spacing
    lower = np.floor(pos).astype(np.int64)
    at_end = (lower == grid.points - 1) & np.isclose(pos, grid.points - 1)
    lower[at_end] = grid.points - 2
    frac = pos - lower
    inside = (lower >= 0) & (lower <= grid.points - 2)
    rows = np.flatnonzero(inside)
    cols = lower[inside]
    data = np.concatenate([1.0 - frac[inside], frac[inside]])
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([cols, cols + 1]))),
        shape=(points.size, grid.points),
    )


def _node_weights(
    model: DiffusionModel,
    targets: np.ndarray,
    spread: np.ndarray,
    xi: np.ndarray,
    weights: np.ndarray,
    tau: float,
) -> np.ndarray:
    """(|B|, Q) weights w_q (1 - tau f0(Z) + tau f1(Z) xi_q / s_i)."""
    f0, f1 = f_coefficients(model, targets.reshape(-1, 1))
    f0 = f0.reshape(targets.shape)
    f1 = f1[:, 0].reshape(targets.shape)
    # s_i = 0 only for tau = 0, where Z = x_i and G is the identity
    scaled = np.divide(
        xi[None, :],
        spread[:, None],
        out=np.zeros(targets.shape),
        where=spread[:, None] > 0,
    )
    return weights[None, :] * (1.0 - tau * f0 + tau * f1 * scaled)


class QuadPredictor:
    """The predict step for fixed (model, grid, tau, gh_order)."""

    def __init__(
        self,
        model: DiffusionModel,
        grid: Grid1D,
        tau: float,
        gh_order: int = DEFAULT_GH_ORDER,
    ):
        if model.d != 1:
            raise Unsupported(
                "the quadrature oracle is one-dimensional", {"d": model.d}
            )
        if gh_order < MIN_GH_ORDER:
            raise InvalidParams("gh_order must be >= 5", {"gh_order": gh_order})
        if tau < 0:
            raise InvalidParams("tau must be non-negative", {"tau": tau})
        self.grid = grid
        self.tau = tau
        self.gh_order = gh_order
        xi, weights = gauss_hermite(gh_order)
        x = grid.column
        spread = model.sigma(x)[:, 0, 0] * np.sqrt(tau)
        targets = x[:, 0:1] + model.mu(x) * tau + spread[:, None] * xi[None, :]
        node_weights = _node_weights(model, targets, spread, xi, weights, tau)
        interp = _interpolation_matrix(targets.ravel(), grid)
        average = sparse.csr_matrix(
            (
                node_weights.ravel(),
                (np.repeat(np.arange(grid.points), gh_order), np.arange(targets.size)),
            ),
            shape=(grid.points, targets.size),
        )
        self.matrix = (average @ interp).tocsr()
        self._warned_boundary = False
        self._warned_negative = False
        self.escaping_rows = np.zeros(0, dtype=np.int64)
        if not model.bounded:
            self._check_escaping_rows(targets)

    def _check_escaping_rows(self, targets: np.ndarray) -> None:
        outside = (targets < self.grid.lower) | (targets > self.grid.upper)
        escaping = np.flatnonzero(np.all(outside, axis=1))
        if escaping.size:
            logger.warning(
                "unbounded drift carries every quadrature node off the grid; "
                "those rows predict zero",
                extra={
                    "rows": int(escaping.size),
                    "lower": self.grid.lower,
                    "upper": self.grid.upper,
                },
            )
        self.escaping_rows = escaping

    def __call__(self, values: np.ndarray) -> np.ndarray:
        """Predict a (|B|,) density or a (S, |B|) batch of densities."""
        out = np.asarray(self.matrix @ np.asarray(values, dtype=float).T).T
        return self._clamp(out)

    def _clamp(self, out: np.ndarray) -> np.ndarray:
        peak = np.max(np.abs(out), axis=-1, keepdims=True)
        if not self._warned_negative and np.any(out < -NEGATIVE_TOLERANCE * peak):
            logger.warning(
                "splitting step produced negative values; clamped to 0",
                extra={"tau": self.tau, "min": float(np.min(out))},
            )
            self._warned_negative = True
        out = np.maximum(out, 0.0)
        if not self._warned_boundary:
            edge = (out[..., 0] + out[..., -1]) * self.grid.spacing
            mass = grid_mass(out, self.grid)
            if np.any(edge > BOUNDARY_MASS_TOLERANCE * np.maximum(mass, MASS_EPSILON)):
                logger.warning(
                    "density mass reaches the grid boundary; widen the grid",
                    extra={"lower": self.grid.lower, "upper": self.grid.upper},
                )
                self._warned_boundary = True
        return out


def quad_predict_step(
    model: DiffusionModel,
    dens: GridDensity,
    tau: float,
    gh_order: int = DEFAULT_GH_ORDER,
) -> GridDensity:
    predictor = QuadPredictor(model, dens.grid, tau, gh_order)
    index = None
    if dens.time_index is not None:
        index = (dens.time_index[0], dens.time_index[1] + 1)
    return GridDensity(dens.grid, predictor(dens.values), index)


def likelihood_rows(
    obs: ObservationModel, columns: np.ndarray, grid: Grid1D
) -> np.ndarray:
    """(S, |B|) likelihood L(y_s, x_i) for S observations of shape (S, d')."""
    x = grid.column
    return np.stack([obs.L(y, x) for y in columns])


def _updated(values, likelihood, normalized, grid, index):
    out = values * likelihood
    masses = grid_mass(out, grid)
    if np.any(masses <= MASS_EPSILON):
        raise DegenerateDensity(
            "Bayes update annihilated the density",
            {
                "time_index": index,
                "rows": np.flatnonzero(masses <= MASS_EPSILON).tolist(),
            },
        )
    if normalized:
        out, _ = normalize_rows(out, grid)
    return out


def quad_filter_batch(
    model: DiffusionModel,
    obs: ObservationModel,
    q0: InitialDensity,
    grid: Grid1D,
    time: TimeGrid,
    ys: Sequence[ObservationSequence],
    gh_order: int = DEFAULT_GH_ORDER,
    normalized_updates: bool = False,
) -> Dict[TimeIndex, np.ndarray]:
    """The oracle filter for S sequences at once: (k, n) -> (S, |B|) values."""
    batch = ObservationBatch.from_sequences(ys).values
    if batch.shape[2] != time.K + 1:
        raise InvalidParams(
            "observation sequences must have K+1 columns",
            {"columns": batch.shape[2], "K": time.K},
        )
    predictor = QuadPredictor(model, grid, time.tau, gh_order)
    values = q0.value(grid.column)[None, :] * likelihood_rows(obs, batch[:, :, 0], grid)
    if normalized_updates:
        values, _ = normalize_rows(values, grid)
    out = {(0, 0): values}
    for k in range(time.K):
        for n in range(1, time.N + 1):
            values = predictor(values)
            out[(k, n)] = values
        values = _updated(
            values,
            likelihood_rows(obs, batch[:, :, k + 1], grid),
            normalized_updates,
            grid,
            (k + 1, 0),
        )
        out[(k + 1, 0)] = values
        logger.debug("oracle window done", extra={"k": k, "N": time.N})
    return out


def quad_filter_run(
    model: DiffusionModel,
    obs: ObservationModel,
    q0: InitialDensity,
    grid: Grid1D,
    time: TimeGrid,
    y: ObservationSequence,
    gh_order: int = DEFAULT_GH_ORDER,
    normalized_updates: bool = False,
) -> Dict[TimeIndex, GridDensity]:
    run = quad_filter_batch(
        model, obs, q0, grid, time, [y], gh_order, normalized_updates
    )
    return {index: GridDensity(grid, values[0], index) for index, values in run.items()}


def standalone_fokker_planck(
    model: DiffusionModel,
    q0: InitialDensity,
    grid: Grid1D,
    N: int,
    T: float,
    gh_order: int = DEFAULT_GH_ORDER,
) -> GridDensity:
    """Prediction only (K = 1, L == 1); returns the density at time T."""
    time = TimeGrid(T, 1, N)
    run = quad_filter_run(
        model,
        unit_likelihood(1),
        q0,
        grid,
        time,
        ObservationSequence(np.zeros((1, 2))),
        gh_order,
    )
    terminal = run[(0, N)]
    return GridDensity(grid, terminal.values, (0, N))
