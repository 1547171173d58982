"""
Reference filters used as ground truth: the Kalman filter for affine
dynamics with linear Gaussian measurements, and a bootstrap particle filter
with a weighted Gaussian kernel density readout for everything else.
"""

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.stats import norm

from ebdsfilter import rng as rngs
from ebdsfilter.exception import DegenerateLikelihood, InvalidParams, Unsupported
from ebdsfilter.grid import Grid1D, GridDensity, TimeIndex
from ebdsfilter.model import DiffusionModel, InitialDensity, ObservationModel
from ebdsfilter.operators import MASS_EPSILON, grid_mass
from ebdsfilter.simulate import ObservationSequence, TimeGrid, em_step

logger = logging.getLogger(__name__)

RESAMPLE_THRESHOLD = 0.5
# grid nodes per block in the KDE readout
KDE_BLOCK = 256


@dataclass(frozen=True)
class GaussianBelief:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise InvalidParams(
                "belief variance must be positive", {"variance": self.variance}
            )


def kalman_predict(
    belief: GaussianBelief,
    drift_const: float,
    dt: float,
    diffusion_const: float,
    drift_slope: float = 0.0,
) -> GaussianBelief:
    """
    Moments of dS = (drift_slope S + drift_const) dt + diffusion_const dW after
    dt. With a zero slope this is mean + drift dt, variance + sigma^2 dt.
    """
    if dt < 0:
        raise InvalidParams("dt must be non-negative", {"dt": dt})
    if drift_slope == 0.0:
        return GaussianBelief(
            belief.mean + drift_const * dt, belief.variance + diffusion_const**2 * dt
        )
    growth = np.exp(drift_slope * dt)
    mean = growth * belief.mean + drift_const / drift_slope * (growth - 1.0)
    spread = diffusion_const**2 / (2.0 * drift_slope) * (growth**2 - 1.0)
    variance = growth**2 * belief.variance + spread
    return GaussianBelief(float(mean), float(variance))


def kalman_update(
    belief: GaussianBelief, y: float, R: float, H: float = 1.0
) -> GaussianBelief:
    if R <= 0:
        raise InvalidParams("measurement variance must be positive", {"R": R})
    gain = belief.variance * H / (H * H * belief.variance + R)
    return GaussianBelief(
        belief.mean + gain * (y - H * belief.mean), (1.0 - gain * H) * belief.variance
    )


def kalman_density(belief: GaussianBelief, grid: Grid1D) -> GridDensity:
    return GridDensity(
        grid, norm.pdf(grid.nodes, loc=belief.mean, scale=np.sqrt(belief.variance))
    )


def _kalman_parts(model: DiffusionModel, obs: ObservationModel, init: InitialDensity):
    if model.affine is None or obs.linear is None or init.gaussian is None:
        raise Unsupported(
            "the Kalman reference needs affine dynamics, a linear Gaussian "
            "measurement and a Gaussian initial density",
            {"model": model.name, "observation": obs.name},
        )
    return model.affine, obs.linear, GaussianBelief(*init.gaussian)


def kalman_filter_run(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    time: TimeGrid,
    y: ObservationSequence,
) -> Dict[TimeIndex, GaussianBelief]:
    """Posterior (n = 0) and predictive (n >= 1) beliefs on every (k, n)."""
    affine, linear, belief = _kalman_parts(model, obs, init)

    def update(b, k):
        return kalman_update(b, float(y.values[0, k]), linear.R, linear.H)

    belief = update(belief, 0)
    out = {(0, 0): belief}
    for k in range(time.K):
        for n in range(1, time.N + 1):
            belief = kalman_predict(
                belief, affine.offset, time.tau, affine.sigma, affine.slope
            )
            out[(k, n)] = belief
        belief = update(belief, k + 1)
        out[(k + 1, 0)] = belief
    return out


class Readout(str, Enum):
    """How particle filter densities are read out on the grid."""

    # mixture of the last Euler-Maruyama substep kernels, exact likelihood
    TRANSITION = "transition"
    # weighted Gaussian KDE, Silverman bandwidth unless one is given
    KDE = "kde"


@dataclass
class ParticleEnsemble:
    particles: np.ndarray  # (P, d)
    weights: np.ndarray  # (P,)
    ids: Optional[np.ndarray] = None  # stream index of each particle
    # centers and widths of the last substep's Gaussian transition, d = 1
    kernel: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim == 1:
            self.particles = self.particles[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.particles.shape[0],):
            raise InvalidParams(
                "one weight per particle required",
                {
                    "particles": self.particles.shape[0],
                    "weights": list(self.weights.shape),
                },
            )
        if self.ids is None:
            self.ids = np.arange(self.particles.shape[0])
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != self.weights.shape:
            raise InvalidParams(
                "one stream index per particle required",
                {"particles": self.particles.shape[0], "ids": list(self.ids.shape)},
            )

    @classmethod
    def uniform(cls, particles) -> "ParticleEnsemble":
        particles = np.asarray(particles, dtype=float)
        return cls(particles, np.full(particles.shape[0], 1.0 / particles.shape[0]))

    def reweighted(self, weights: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(self.particles, weights, self.ids, self.kernel)

    def permuted(self, order) -> "ParticleEnsemble":
        """Reorder particles together with their streams and kernels."""
        kernel = None
        if self.kernel is not None:
            kernel = (self.kernel[0][order], self.kernel[1][order])
        return ParticleEnsemble(
            self.particles[order], self.weights[order], self.ids[order], kernel
        )

    @property
    def P(self) -> int:
        return self.particles.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    @property
    def variance(self) -> np.ndarray:
        diff = self.particles - self.mean
        return self.weights @ diff**2


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling: one uniform offset, P evenly spaced pointers."""
    size = weights.size
    cumsum = np.cumsum(weights)
    pointers = rng.uniform(0.0, 1.0 / size) + np.arange(size) / size
    return np.clip(np.searchsorted(cumsum, pointers), 0, size - 1)


def pf_propagate(
    ensemble: ParticleEnsemble,
    model: DiffusionModel,
    dt: float,
    substeps: int,
    noise: rngs.KeyedStream,
    step: int,
) -> ParticleEnsemble:
    """
    Euler-Maruyama over dt in ``substeps`` steps. Particle i draws substep s
    of propagation ``step`` from ``noise`` at index ids[i], so the result
    does not depend on the order of the particles.
    """
    if dt < 0:
        raise InvalidParams("dt must be non-negative", {"dt": dt})
    if dt == 0:
        return ensemble
    h = dt / substeps
    state = ensemble.particles
    m = model.sigma(state[:1]).shape[-1]
    kernel = None
    for sub in range(substeps):
        if sub == substeps - 1 and model.d == 1:
            kernel = (
                state[:, 0] + model.mu(state)[:, 0] * h,
                model.sigma(state)[:, 0, 0] * np.sqrt(h),
            )
        dW = noise.normals(ensemble.ids, (step, sub), m) * np.sqrt(h)
        state = em_step(model, state, h, dW)
    return ParticleEnsemble(state, ensemble.weights, ensemble.ids, kernel)


def pf_weight(
    ensemble: ParticleEnsemble, obs: ObservationModel, y_k
) -> ParticleEnsemble:
    weights = ensemble.weights * obs.L(np.asarray(y_k, dtype=float), ensemble.particles)
    total = weights.sum()
    if not (np.isfinite(total) and total > 0):
        raise DegenerateLikelihood(
            "all particle weights vanished",
            {"P": ensemble.P, "y": np.asarray(y_k).tolist()},
        )
    return ensemble.reweighted(weights / total)


def pf_resample(
    ensemble: ParticleEnsemble, rng: np.random.Generator
) -> ParticleEnsemble:
    """Systematic resampling once the ESS drops below half the ensemble."""
    if ensemble.ess >= RESAMPLE_THRESHOLD * ensemble.P:
        return ensemble
    idx = systematic_resample(ensemble.weights, rng)
    return ParticleEnsemble.uniform(ensemble.particles[idx])


def pf_reweight(
    ensemble: ParticleEnsemble,
    obs: ObservationModel,
    y_k,
    rng: np.random.Generator,
) -> ParticleEnsemble:
    return pf_resample(pf_weight(ensemble, obs, y_k), rng)


def pf_step(
    ensemble: ParticleEnsemble,
    model: DiffusionModel,
    obs: ObservationModel,
    y_k,
    dt: float,
    substeps: int,
    noise: rngs.KeyedStream,
    step: int,
    rng: np.random.Generator,
) -> ParticleEnsemble:
    """Propagate over dt, weight by L(y_k, .), resample when ESS < P/2."""
    return pf_reweight(
        pf_propagate(ensemble, model, dt, substeps, noise, step), obs, y_k, rng
    )


def silverman_bandwidth(ensemble: ParticleEnsemble) -> float:
    std = float(np.sqrt(ensemble.variance[0]))
    return std * (0.75 * ensemble.ess) ** (-0.2)


def _kernel_sum(nodes, centers, widths, weights) -> np.ndarray:
    values = np.empty(nodes.size)
    scale = weights / (widths * np.sqrt(2.0 * np.pi))
    for start in range(0, nodes.size, KDE_BLOCK):
        block = nodes[start : start + KDE_BLOCK]
        z = (block[:, None] - centers[None, :]) / widths[None, :]
        values[start : start + KDE_BLOCK] = np.exp(-0.5 * z * z) @ scale
    return values


def pf_density(
    ensemble: ParticleEnsemble, grid: Grid1D, bandwidth=None
) -> GridDensity:
    """
    Weighted Gaussian KDE on the grid. ``bandwidth`` is a scalar, one width
    per particle, or None for Silverman's rule.
    """
    if ensemble.particles.shape[1] != 1:
        raise Unsupported("the KDE readout is one-dimensional")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ensemble)
    widths = np.broadcast_to(np.asarray(bandwidth, dtype=float), (ensemble.P,))
    if not np.all(widths > 0):
        logger.warning("degenerate KDE bandwidth; using the grid spacing")
        widths = np.where(widths > 0, widths, grid.spacing)
    values = _kernel_sum(grid.nodes, ensemble.particles[:, 0], widths, ensemble.weights)
    return GridDensity(grid, values)


def transition_density(ensemble: ParticleEnsemble, grid: Grid1D) -> GridDensity:
    """
    Predictive density as the weighted mixture of the last substep's Gaussian
    transition kernels; no smoothing bandwidth is involved.
    """
    if ensemble.kernel is None:
        raise InvalidParams("ensemble carries no transition kernel")
    centers, widths = ensemble.kernel
    return GridDensity(grid, _kernel_sum(grid.nodes, centers, widths, ensemble.weights))


def _posterior_values(
    prior: np.ndarray, obs: ObservationModel, y_k, grid: Grid1D
) -> np.ndarray:
    values = prior * obs.L(np.asarray(y_k, dtype=float), grid.column)
    mass = grid_mass(values, grid)
    if not mass > MASS_EPSILON:
        raise DegenerateLikelihood(
            "likelihood annihilated the particle readout",
            {"y": np.asarray(y_k).tolist()},
        )
    return values / mass


def sequence_key(y: ObservationSequence) -> Tuple[int, int]:
    """Stable per-sequence stream index derived from the observation values."""
    digest = hashlib.sha256(np.ascontiguousarray(y.values).tobytes()).digest()
    return int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")


def particle_filter_run(
    model: DiffusionModel,
    obs: ObservationModel,
    init: InitialDensity,
    time: TimeGrid,
    y: ObservationSequence,
    grid: Grid1D,
    P: int = 10000,
    substeps: int = 8,
    seed: int = 0,
    bandwidth: Optional[float] = None,
    readout: Readout = Readout.TRANSITION,
) -> Dict[TimeIndex, np.ndarray]:
    """
    Grid readouts of a bootstrap particle filter on every (k, n).

    With the transition readout the predictive density is the mixture of the
    last substep kernels and each posterior is that mixture times the
    likelihood on the grid, renormalized; at t_0 the initial density takes
    the place of the mixture. ``bandwidth`` only applies to the KDE readout.
    """
    if P < 1:
        raise InvalidParams("need at least one particle", {"P": P})
    readout = Readout(readout)
    key = sequence_key(y)
    gen = rngs.stream(seed, rngs.PARTICLES, *key)
    noise = rngs.KeyedStream(seed, rngs.PARTICLES, *key, 1)

    def posterior(ensemble, prior, k):
        if readout == Readout.KDE:
            return pf_density(ensemble, grid, bandwidth).values
        return _posterior_values(prior, obs, y.column(k), grid)

    ensemble = ParticleEnsemble.uniform(init.sample(gen, P))
    prior = init.value(grid.column) if readout == Readout.TRANSITION else None
    ensemble = pf_weight(ensemble, obs, y.column(0))
    out = {(0, 0): posterior(ensemble, prior, 0)}
    ensemble = pf_resample(ensemble, gen)
    step = 0
    for k in range(time.K):
        for n in range(1, time.N + 1):
            ensemble = pf_propagate(ensemble, model, time.tau, substeps, noise, step)
            step += 1
            if readout == Readout.KDE:
                prior = pf_density(ensemble, grid, bandwidth).values
            else:
                prior = transition_density(ensemble, grid).values
            out[(k, n)] = prior
        ensemble = pf_weight(ensemble, obs, y.column(k + 1))
        out[(k + 1, 0)] = posterior(ensemble, prior, k + 1)
        ensemble = pf_resample(ensemble, gen)
    logger.debug(
        "particle filter done",
        extra={"P": P, "K": time.K, "N": time.N, "readout": readout.value},
    )
    return out

