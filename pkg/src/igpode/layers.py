from __future__ import annotations

from dataclasses import dataclass
from typing import Callable
from typing import Mapping
from typing import Sequence

import numpy as np

from igpode import diffmath as dm
from igpode.diffmath import Operand
from igpode.diffmath import Tensor
from igpode.errors import ConfigError
from igpode.errors import DimensionError
from igpode.params import ParamStore

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": dm.relu,
    "elu": dm.elu,
    "softplus": dm.softplus,
    "tanh": dm.tanh,
}


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, shape)


# --------------------------------------------------------------------------------
# Multi-layer perceptron
# --------------------------------------------------------------------------------


def init_mlp(
    store: ParamStore,
    prefix: str,
    sizes: Sequence[int],
    rng: np.random.Generator,
) -> None:
    """Registers weights ``{prefix}.w{i}`` and biases ``{prefix}.b{i}``.

    Weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases start
    at zero.
    """
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        store.register(f"{prefix}.w{i}", _uniform(rng, bound, (fan_in, fan_out)))
        store.register(f"{prefix}.b{i}", np.zeros(fan_out))


@dataclass(frozen=True)
class MLP:
    """Dense layers with one activation between them and a linear output."""

    weights: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def from_params(
        cls,
        params: Mapping[str, Tensor],
        prefix: str,
        activation: str = "relu",
    ) -> MLP:
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{activation}'")
        weights, biases = [], []
        i = 0
        while f"{prefix}.w{i}" in params:
            weights.append(params[f"{prefix}.w{i}"])
            biases.append(params[f"{prefix}.b{i}"])
            i += 1
        if not weights:
            raise ConfigError(f"no MLP parameters found under '{prefix}'")
        return cls(tuple(weights), tuple(biases), activation)

    def __call__(self, x: Operand) -> Tensor:
        tape = self.weights[0].tape
        h = dm.as_tensor(tape, x)
        if h.shape[-1] != self.input_dim:
            raise DimensionError(
                f"MLP expects {self.input_dim} input features, got {h.shape[-1]}",
            )
        act = ACTIVATIONS[self.activation]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act(h)
        return h


# --------------------------------------------------------------------------------
# Gated recurrent unit
# --------------------------------------------------------------------------------


def init_gru(
    store: ParamStore,
    prefix: str,
    input_dim: int,
    hidden_dim: int,
    rng: np.random.Generator,
) -> None:
    """Registers the stacked update/reset/candidate gate parameters.

    ``w_x`` is ``(input_dim, 3H)``, ``w_h`` is ``(H, 3H)`` and ``b`` is
    ``(3H,)``, all uniform in ``[-1/sqrt(H), 1/sqrt(H)]``.
    """
    bound = 1.0 / np.sqrt(hidden_dim)
    store.register(f"{prefix}.w_x", _uniform(rng, bound, (input_dim, 3 * hidden_dim)))
    store.register(f"{prefix}.w_h", _uniform(rng, bound, (hidden_dim, 3 * hidden_dim)))
    store.register(f"{prefix}.b", _uniform(rng, bound, (3 * hidden_dim,)))


@dataclass(frozen=True)
class GRU:
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> GRU:
        return cls(
            params[f"{prefix}.w_x"],
            params[f"{prefix}.w_h"],
            params[f"{prefix}.b"],
        )

    def cell(self, x: Tensor, h: Tensor) -> Tensor:
        size = self.hidden_dim
        gx = x @ self.w_x + self.b
        gh = h @ self.w_h
        update = dm.sigmoid(gx[:, :size] + gh[:, :size])
        reset = dm.sigmoid(gx[:, size : 2 * size] + gh[:, size : 2 * size])
        candidate = dm.tanh(gx[:, 2 * size :] + reset * gh[:, 2 * size :])
        return (1.0 - update) * candidate + update * h

    def __call__(self, sequence: np.ndarray) -> Tensor:
        """Runs over ``sequence`` of shape ``(batch, steps, features)`` in order and
        returns the final hidden state.
        """
        tape = self.w_x.tape
        batch, steps, _ = sequence.shape
        h = dm.as_tensor(tape, np.zeros((batch, self.hidden_dim)))
        for t in range(steps):
            h = self.cell(dm.as_tensor(tape, sequence[:, t, :]), h)
        return h
