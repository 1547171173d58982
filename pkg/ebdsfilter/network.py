"""
Fully connected energy network: density(x, y) = exp(-f_theta(x, y)).

Plain numpy forward/backward passes. Parameters are trained through the
squared regression loss on the density; the input gradient is exact
(reverse pass through the rectifier masks, subgradient 0 at the kink).
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ebdsfilter.exception import InvalidParams


@dataclass
class EnergyNetwork:
    input_dim: int
    width: int
    depth: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_shift: np.ndarray
    input_scale: np.ndarray
    state_dim: int = 1
    history: dict = field(default_factory=dict)

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        width: int,
        depth: int,
        rng: np.random.Generator,
        state_dim: int = 1,
    ) -> "EnergyNetwork":
        """Uniform He fan-in initialisation, zero biases."""
        if depth < 1 or width < 1:
            raise InvalidParams("network needs depth >= 1 and width >= 1")
        sizes = [input_dim] + [width] * depth + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(
            input_dim=input_dim,
            width=width,
            depth=depth,
            weights=weights,
            biases=biases,
            input_shift=np.zeros(input_dim),
            input_scale=np.ones(input_dim),
            state_dim=state_dim,
        )

    def copy(self) -> "EnergyNetwork":
        return EnergyNetwork(
            input_dim=self.input_dim,
            width=self.width,
            depth=self.depth,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_shift=self.input_shift.copy(),
            input_scale=self.input_scale.copy(),
            state_dim=self.state_dim,
        )

    def fit_input_scaling(self, inputs: np.ndarray):
        self.input_shift = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        self.input_scale = np.where(std > 1e-12, std, 1.0)

    @property
    def parameters(self) -> List[np.ndarray]:
        return self.weights + self.biases

    def _check(self, inputs: np.ndarray) -> np.ndarray:
        arr = np.asarray(inputs, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != self.input_dim:
            raise InvalidParams(
                "input dimension mismatch",
                {"expected": self.input_dim, "got": arr.shape[1]},
            )
        return arr

    def forward(self, inputs) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Energies f (B,) and the layer activations needed by backward."""
        h = (self._check(inputs) - self.input_shift) / self.input_scale
        activations = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            activations.append(h)
        energy = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return energy, activations

    def energy(self, inputs) -> np.ndarray:
        return self.forward(inputs)[0]

    def density(self, inputs) -> np.ndarray:
        return np.exp(-self.energy(inputs))

    def energy_input_gradient(self, activations: List[np.ndarray]) -> np.ndarray:
        """d f / d inputs (B, input_dim), reverse pass through the masks."""
        grad = np.broadcast_to(
            self.weights[-1][:, 0], (activations[0].shape[0], self.weights[-1].shape[0])
        )
        for layer in range(len(self.weights) - 2, -1, -1):
            grad = (grad * (activations[layer + 1] > 0.0)) @ self.weights[layer].T
        return grad / self.input_scale

    def backward(
        self, activations: List[np.ndarray], dloss_denergy: np.ndarray
    ) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """Parameter gradients for a loss with d loss / d f = dloss_denergy (B,)."""
        dout = dloss_denergy[:, None]
        dweights, dbiases = [], []
        for layer in range(len(self.weights) - 1, -1, -1):
            dweights.append(activations[layer].T @ dout)
            dbiases.append(dout.sum(axis=0))
            if layer > 0:
                dout = (dout @ self.weights[layer].T) * (activations[layer] > 0.0)
        return dweights[::-1], dbiases[::-1]


def net_eval(net: EnergyNetwork, x, y_prefix) -> Tuple[np.ndarray, np.ndarray]:
    """
    Density exp(-f) at (x, y_prefix) and its gradient with respect to x.
    Batched: x (B, d), y_prefix (B, d'(k+1)) or a single prefix row.
    """
    pts = np.asarray(x, dtype=float).reshape(-1, net.state_dim)
    prefix_dim = net.input_dim - net.state_dim
    prefix = np.asarray(y_prefix, dtype=float).reshape(-1, prefix_dim)
    if prefix.shape[0] == 1 and pts.shape[0] > 1:
        prefix = np.broadcast_to(prefix, (pts.shape[0], prefix.shape[1]))
    if prefix.shape[0] != pts.shape[0]:
        raise InvalidParams(
            "state and observation batches differ in size",
            {"states": pts.shape[0], "observations": prefix.shape[0]},
        )
    energy, activations = net.forward(np.hstack([pts, prefix]))
    value = np.exp(-energy)
    grad_energy = net.energy_input_gradient(activations)[:, : net.state_dim]
    return value, -value[:, None] * grad_energy


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        for param, grad in zip(params, grads):
            param -= self.learning_rate * grad


class Adam:
    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None
        self._t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        correction1 = 1.0 - self.beta1**self._t
        correction2 = 1.0 - self.beta2**self._t
        for param, grad, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad**2
            step = m / correction1 / (np.sqrt(v / correction2) + self.eps)
            param -= self.learning_rate * step
