"""
The splitting algebra shared by the quadrature oracle and the neural trainer:
F phi = f0 phi + <f1, grad phi>, G = I + tau F, Bayes' update and grid
normalisation.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from ebdsfilter.exception import DegenerateDensity, InvalidParams
from ebdsfilter.grid import Grid1D, GridDensity
from ebdsfilter.model import (
    DiffusionModel,
    ObservationModel,
    central_gradient,
    f_coefficients,
)

MASS_EPSILON = 1e-300


@dataclass(frozen=True)
class DifferentiableDensity:
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_function(cls, value, gradient=None) -> "DifferentiableDensity":
        if gradient is None:
            return cls(value, lambda x: central_gradient(value, np.asarray(x, float)))
        return cls(value, gradient)


def F_values(f0, f1, value, grad):
    return f0 * value + np.sum(f1 * grad, axis=-1)


def G_values(f0, f1, value, grad, tau: float):
    return value + tau * F_values(f0, f1, value, grad)


def apply_F(model: DiffusionModel, phi: DifferentiableDensity, x) -> np.ndarray:
    f0, f1 = f_coefficients(model, x)
    pts = np.asarray(x, dtype=float).reshape(f1.shape)
    return F_values(f0, f1, phi.value(pts), phi.gradient(pts))


def apply_G(
    model: DiffusionModel, phi: DifferentiableDensity, tau: float, x
) -> np.ndarray:
    if tau < 0:
        raise InvalidParams("tau must be non-negative", {"tau": tau})
    pts = np.asarray(x, dtype=float).reshape(-1, model.d)
    return phi.value(pts) + tau * apply_F(model, phi, pts)


def bayes_update(
    prior: Callable[[np.ndarray], np.ndarray],
    obs: ObservationModel,
    y_k,
    normalized: bool = False,
    grid: Optional[Grid1D] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """
    x -> prior(x) L(y_k, x). Unnormalized unless ``normalized`` is set, in
    which case the product is divided by its trapezoidal mass on ``grid``.
    """
    y_k = np.asarray(y_k, dtype=float)

    def posterior(x):
        pts = np.asarray(x, dtype=float)
        return prior(pts) * obs.L(y_k, pts)

    if not normalized:
        return posterior
    if grid is None:
        raise InvalidParams("a normalized update needs a quadrature grid")
    mass = grid_mass(posterior(grid.column), grid)
    if mass <= MASS_EPSILON:
        raise DegenerateDensity("update annihilated the density", {"mass": mass})
    return lambda x: posterior(x) / mass


def grid_mass(values: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Trapezoidal mass along the last axis (batched)."""
    return trapezoid(values, dx=grid.spacing, axis=-1)


def normalize_on_grid(values: GridDensity) -> Tuple[GridDensity, float]:
    if np.any(values.values < 0):
        raise InvalidParams("cannot normalize a density with negative values")
    mass = float(grid_mass(values.values, values.grid))
    if mass <= MASS_EPSILON:
        raise DegenerateDensity(
            "density mass vanished on the grid",
            {"mass": mass, "time_index": values.time_index},
        )
    return GridDensity(values.grid, values.values / mass, values.time_index), mass


def normalize_rows(values: np.ndarray, grid: Grid1D) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise normalize_on_grid for a (S, |B|) batch of densities."""
    masses = np.atleast_1d(grid_mass(values, grid))
    if np.any(masses <= MASS_EPSILON):
        raise DegenerateDensity(
            "density mass vanished on the grid",
            {"rows": np.flatnonzero(masses <= MASS_EPSILON).tolist()},
        )
    return values / masses[..., None], masses
