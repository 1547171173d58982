"""
State and observation models.

All callbacks are vectorised over a batch of points: a state batch has shape
``(B, d)``, an observation batch ``(B, d')``. Callbacks must be pure, they are
evaluated concurrently by the samplers and the quadrature oracle.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.stats import norm

from ebdsfilter.exception import CoefficientError, ConfigError, InvalidParams

logger = logging.getLogger(__name__)

Array = np.ndarray
PointFn = Callable[[Array], Array]

FD_RELATIVE_STEP = 1e-5
FD_SECOND_RELATIVE_STEP = 1e-4


class DerivativeMode(str, Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "central-finite-difference"


class AffineDynamics(NamedTuple):
    """dS = (slope * S + offset) dt + sigma dW, scalar state."""

    slope: float
    offset: float
    sigma: float


class LinearObservation(NamedTuple):
    """O = H * S + N(0, R), scalar observation."""

    H: float
    R: float


def as_points(x, d: int) -> Array:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, d) if d > 1 else pts.reshape(-1, 1)
    if pts.shape[-1] != d:
        raise InvalidParams(
            f"expected points of dimension {d}, got shape {pts.shape}",
            {"expected": d, "shape": list(pts.shape)},
        )
    return pts


def _fd_steps(x: Array, rel: float) -> Array:
    return rel * np.maximum(1.0, np.abs(x))


@dataclass(frozen=True)
class DiffusionModel:
    d: int
    drift: PointFn
    diffusion: PointFn
    drift_jacobian: Optional[PointFn] = None
    a_first_derivs: Optional[PointFn] = None
    a_second_trace: Optional[PointFn] = None
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    name: str = "custom"
    affine: Optional[AffineDynamics] = None
    bounded: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise InvalidParams("state dimension must be positive", {"d": self.d})
        if self.derivative_mode == DerivativeMode.ANALYTIC and None in (
            self.drift_jacobian,
            self.a_first_derivs,
            self.a_second_trace,
        ):
            raise InvalidParams(
                "analytic derivative mode needs drift_jacobian, a_first_derivs "
                "and a_second_trace; use with_finite_differences()",
                {"model": self.name},
            )

    def with_finite_differences(self) -> "DiffusionModel":
        return replace(self, derivative_mode=DerivativeMode.FINITE_DIFFERENCE)

    def mu(self, x) -> Array:
        pts = as_points(x, self.d)
        return np.asarray(self.drift(pts), dtype=float).reshape(pts.shape)

    def sigma(self, x) -> Array:
        pts = as_points(x, self.d)
        return np.asarray(self.diffusion(pts), dtype=float).reshape(
            pts.shape[0], self.d, -1
        )

    def a(self, x) -> Array:
        sig = self.sigma(x)
        return np.einsum("bik,bjk->bij", sig, sig)

    def jacobian(self, x) -> Array:
        """(B, d, d) with [b, i, j] = d mu_i / d x_j."""
        pts = as_points(x, self.d)
        if self.derivative_mode == DerivativeMode.ANALYTIC:
            return np.asarray(self.drift_jacobian(pts), dtype=float).reshape(
                pts.shape[0], self.d, self.d
            )
        out = np.empty((pts.shape[0], self.d, self.d))
        steps = _fd_steps(pts, FD_RELATIVE_STEP)
        for j in range(self.d):
            shift = np.zeros_like(pts)
            shift[:, j] = steps[:, j]
            out[:, :, j] = (self.mu(pts + shift) - self.mu(pts - shift)) / (
                2.0 * steps[:, j, None]
            )
        return out

    def a_derivs(self, x) -> Array:
        """(B, d, d, d) with [b, i, j, l] = d a_ij / d x_l."""
        pts = as_points(x, self.d)
        if self.derivative_mode == DerivativeMode.ANALYTIC:
            return np.asarray(self.a_first_derivs(pts), dtype=float).reshape(
                pts.shape[0], self.d, self.d, self.d
            )
        out = np.empty((pts.shape[0], self.d, self.d, self.d))
        steps = _fd_steps(pts, FD_RELATIVE_STEP)
        for l in range(self.d):
            shift = np.zeros_like(pts)
            shift[:, l] = steps[:, l]
            out[..., l] = (self.a(pts + shift) - self.a(pts - shift)) / (
                2.0 * steps[:, l, None, None]
            )
        return out

    def a_trace2(self, x) -> Array:
        """(B,) sum_ij d^2 a_ij / dx_i dx_j."""
        pts = as_points(x, self.d)
        if self.derivative_mode == DerivativeMode.ANALYTIC:
            return np.asarray(self.a_second_trace(pts), dtype=float).reshape(-1)
        steps = _fd_steps(pts, FD_SECOND_RELATIVE_STEP)
        total = np.zeros(pts.shape[0])
        for i in range(self.d):
            ei = np.zeros_like(pts)
            ei[:, i] = steps[:, i]
            for j in range(self.d):
                if i == j:
                    second = (
                        self.a(pts + ei)[:, i, i]
                        - 2.0 * self.a(pts)[:, i, i]
                        + self.a(pts - ei)[:, i, i]
                    ) / steps[:, i] ** 2
                else:
                    ej = np.zeros_like(pts)
                    ej[:, j] = steps[:, j]
                    second = (
                        self.a(pts + ei + ej)[:, i, j]
                        - self.a(pts + ei - ej)[:, i, j]
                        - self.a(pts - ei + ej)[:, i, j]
                        + self.a(pts - ei - ej)[:, i, j]
                    ) / (4.0 * steps[:, i] * steps[:, j])
                total += second
        return total


def _check_finite(component: str, values: Array, model: DiffusionModel) -> Array:
    if not np.all(np.isfinite(values)):
        raise CoefficientError(
            f"non-finite {component} for model '{model.name}'",
            {"component": component, "model": model.name},
        )
    return values


def f_coefficients(model: DiffusionModel, x) -> Tuple[Array, Array]:
    """
    Zeroth and first order coefficients of F = A* - A.

    f0 = 1/2 sum_ij d_ij a_ij - sum_i d_i mu_i
    f1_j = sum_i d_i a_ij - 2 mu_j
    """
    pts = as_points(x, model.d)
    jac = _check_finite("drift_jacobian", model.jacobian(pts), model)
    dadx = _check_finite("a_first_derivs", model.a_derivs(pts), model)
    trace2 = _check_finite("a_second_trace", model.a_trace2(pts), model)
    mu = _check_finite("drift", model.mu(pts), model)
    f0 = 0.5 * trace2 - np.trace(jac, axis1=1, axis2=2)
    f1 = np.einsum("biji->bj", dadx) - 2.0 * mu
    return f0, f1


@dataclass(frozen=True)
class ObservationModel:
    d_prime: int
    likelihood: Callable[[Array, Array], Array]
    sampler: Callable[[Array, np.random.Generator], Array]
    likelihood_grad: Optional[Callable[[Array, Array], Array]] = None
    bound: float = np.inf
    linear: Optional[LinearObservation] = None
    name: str = "custom"

    def L(self, y, x) -> Array:
        """Likelihood of one observation ``y`` (d',) or a batch (B, d') at x (B, d)."""
        pts = np.asarray(x, dtype=float)
        obs = np.asarray(y, dtype=float).reshape(-1, self.d_prime)
        return np.asarray(self.likelihood(obs, pts), dtype=float).reshape(-1)

    def grad_L(self, y, x) -> Array:
        pts = np.asarray(x, dtype=float)
        obs = np.asarray(y, dtype=float).reshape(-1, self.d_prime)
        if self.likelihood_grad is not None:
            return np.asarray(self.likelihood_grad(obs, pts), dtype=float).reshape(
                pts.shape
            )
        return central_gradient(lambda p: self.L(obs, p), pts)

    def sample(self, x, rng: np.random.Generator) -> Array:
        return np.asarray(self.sampler(np.asarray(x, dtype=float), rng)).reshape(
            -1, self.d_prime
        )


@dataclass(frozen=True)
class InitialDensity:
    d: int
    density: PointFn
    sampler: Callable[[np.random.Generator, int], Array]
    density_grad: Optional[PointFn] = None
    training: Optional["InitialDensity"] = field(default=None, repr=False)
    gaussian: Optional[Tuple[float, float]] = None

    @property
    def training_density(self) -> "InitialDensity":
        """q~0, the law the training paths start from (q0 unless overridden)."""
        return self.training if self.training is not None else self

    def value(self, x) -> Array:
        pts = as_points(x, self.d)
        return np.asarray(self.density(pts), dtype=float).reshape(-1)

    def grad(self, x) -> Array:
        pts = as_points(x, self.d)
        if self.density_grad is not None:
            return np.asarray(self.density_grad(pts), dtype=float).reshape(pts.shape)
        return central_gradient(self.value, pts)

    def sample(self, rng: np.random.Generator, size: int) -> Array:
        return np.asarray(self.sampler(rng, size), dtype=float).reshape(size, self.d)

    def with_training(self, training: "InitialDensity") -> "InitialDensity":
        return replace(self, training=training)


def central_gradient(fn: PointFn, pts: Array) -> Array:
    steps = _fd_steps(pts, FD_RELATIVE_STEP)
    out = np.empty_like(pts)
    for j in range(pts.shape[1]):
        shift = np.zeros_like(pts)
        shift[:, j] = steps[:, j]
        out[:, j] = (fn(pts + shift) - fn(pts - shift)) / (2.0 * steps[:, j])
    return out


def gaussian_initial(mean: float = 0.0, variance: float = 1.0) -> InitialDensity:
    if variance <= 0:
        raise InvalidParams("initial variance must be positive", {"variance": variance})
    std = float(np.sqrt(variance))

    def density(x):
        return norm.pdf(x[:, 0], loc=mean, scale=std)

    def density_grad(x):
        return (-(x - mean) / variance) * density(x)[:, None]

    def sampler(rng, size):
        return rng.normal(mean, std, size=(size, 1))

    return InitialDensity(
        d=1,
        density=density,
        sampler=sampler,
        density_grad=density_grad,
        gaussian=(float(mean), float(variance)),
    )


def linear_gaussian_observation(H: float = 1.0, R: float = 1.0) -> ObservationModel:
    """Scalar Gaussian measurements y ~ N(H x, R)."""
    if R <= 0:
        raise InvalidParams("observation variance must be positive", {"R": R})
    std = float(np.sqrt(R))

    def likelihood(y, x):
        return norm.pdf(y[:, 0], loc=H * x[:, 0], scale=std)

    def likelihood_grad(y, x):
        return (H * (y[:, 0] - H * x[:, 0]) / R * likelihood(y, x))[:, None]

    def sampler(x, rng):
        return H * x + rng.normal(0.0, std, size=x.shape)

    return ObservationModel(
        d_prime=1,
        likelihood=likelihood,
        sampler=sampler,
        likelihood_grad=likelihood_grad,
        bound=1.0 / (std * np.sqrt(2.0 * np.pi)),
        linear=LinearObservation(float(H), float(R)),
        name="gaussian",
    )


def unit_likelihood(d_prime: int = 1) -> ObservationModel:
    """L == 1: turns the filter into a pure Fokker-Planck solver."""

    def likelihood(y, x):
        return np.ones(np.asarray(x).shape[0])

    def likelihood_grad(y, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sampler(x, rng):
        return np.zeros((np.asarray(x).shape[0], d_prime))

    return ObservationModel(
        d_prime=d_prime,
        likelihood=likelihood,
        sampler=sampler,
        likelihood_grad=likelihood_grad,
        bound=1.0,
        name="unit",
    )


def _constant_sigma_model(
    name, drift, drift_prime, affine=None, sigma=1.0, bounded=True
):
    def diffusion(x):
        return np.full((x.shape[0], 1, 1), sigma)

    def a_first_derivs(x):
        return np.zeros((x.shape[0], 1, 1, 1))

    def a_second_trace(x):
        return np.zeros(x.shape[0])

    return DiffusionModel(
        d=1,
        drift=lambda x: drift(x[:, 0])[:, None],
        diffusion=diffusion,
        drift_jacobian=lambda x: drift_prime(x[:, 0])[:, None, None],
        a_first_derivs=a_first_derivs,
        a_second_trace=a_second_trace,
        name=name,
        affine=affine,
        bounded=bounded,
    )


ModelBundle = Tuple[DiffusionModel, ObservationModel, InitialDensity]


def builtin_drifted_bm() -> ModelBundle:
    model = _constant_sigma_model(
        "drifted_bm",
        drift=lambda x: np.full_like(x, 2.0),
        drift_prime=np.zeros_like,
        affine=AffineDynamics(slope=0.0, offset=2.0, sigma=1.0),
    )
    return model, linear_gaussian_observation(1.0, 1.0), gaussian_initial(0.0, 1.0)


def builtin_bistable() -> ModelBundle:
    # mu(x) = 2/5 (5x - x^3); unbounded drift, accepted as a stress test
    model = _constant_sigma_model(
        "bistable",
        drift=lambda x: 2.0 * x - 0.4 * x**3,
        drift_prime=lambda x: 2.0 - 1.2 * x**2,
        bounded=False,
    )
    return model, linear_gaussian_observation(1.0, 1.0), gaussian_initial(0.0, 1.0)


def builtin_heat() -> ModelBundle:
    model = _constant_sigma_model(
        "heat",
        drift=np.zeros_like,
        drift_prime=np.zeros_like,
        affine=AffineDynamics(slope=0.0, offset=0.0, sigma=1.0),
    )
    return model, linear_gaussian_observation(1.0, 1.0), gaussian_initial(0.0, 1.0)


BUILTIN_MODELS: Dict[str, Callable[[], ModelBundle]] = {
    "drifted_bm": builtin_drifted_bm,
    "bistable": builtin_bistable,
    "heat": builtin_heat,
}


def get_builtin(
    name: str, training_init: Optional[Tuple[float, float]] = None
) -> ModelBundle:
    """Built-in bundle by name, optionally with a Gaussian q~0 override."""
    if name not in BUILTIN_MODELS:
        raise ConfigError(
            f"unknown model '{name}'", {"model": name, "known": sorted(BUILTIN_MODELS)}
        )
    model, obs, init = BUILTIN_MODELS[name]()
    if training_init is not None:
        init = init.with_training(gaussian_initial(*training_init))
        logger.info("training initial density overridden: N%s", tuple(training_init))
    return model, obs, init
