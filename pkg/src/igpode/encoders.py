"""Amortised posteriors over initial states and per-object global latents.

Both encoders run a GRU over one object's own observations at a time, with
weights shared across objects, so permuting objects permutes the posteriors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from igpode import diffmath as dm
from igpode.diffmath import Tensor
from igpode.errors import DimensionError
from igpode.errors import InputError
from igpode.gp import kl_diag_gaussian_vs_standard
from igpode.layers import GRU
from igpode.layers import MLP
from igpode.layers import init_gru
from igpode.layers import init_mlp
from igpode.params import ParamStore

INITIAL_PREFIX = 5
GLOBAL_PREFIX = 49
INITIAL_HIDDEN = 10
GLOBAL_HIDDEN = 25
HEAD_HIDDEN = 50


@dataclass(frozen=True)
class GaussianPosterior:
    """Diagonal Gaussian given by mean and log-variance tensors of equal shape."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean {self.mean.shape} and log-variance {self.log_var.shape} differ",
            )

    @property
    def variance(self) -> Tensor:
        return dm.exp(self.log_var)

    def kl(self) -> Tensor:
        """KL divergence to the standard normal prior."""
        return kl_diag_gaussian_vs_standard(self.mean, self.log_var)


def reparameterize(q: GaussianPosterior, rng: np.random.Generator) -> Tensor:
    """``mean + exp(0.5 * log_var) * eps`` with ``eps ~ N(0, I)``."""
    eps = dm.gaussian(rng, q.mean.shape)
    return q.mean + dm.exp(0.5 * q.log_var) * eps


def _per_object(observations: np.ndarray, steps: int, what: str) -> np.ndarray:
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 4:
        raise InputError(
            f"{what} expects observations (batch, time, objects, dims), "
            f"got {obs.shape}",
        )
    if obs.shape[1] < steps:
        raise InputError(
            f"{what} needs {steps} observations per object, got {obs.shape[1]}",
        )
    batch, _, num, dim = obs.shape
    return obs[:, :steps].transpose(0, 2, 1, 3).reshape(batch * num, steps, dim)


# --------------------------------------------------------------------------------
# Initial value encoder
# --------------------------------------------------------------------------------


def init_initial_encoder(
    store: ParamStore,
    prefix: str,
    obs_dim: int,
    pos_dim: int,
    rng: np.random.Generator,
    hidden: int = INITIAL_HIDDEN,
    head_hidden: int = HEAD_HIDDEN,
) -> None:
    half = hidden // 2
    init_gru(store, f"{prefix}.gru", obs_dim, hidden, rng)
    init_mlp(store, f"{prefix}.pos_head", [half, head_hidden, 2 * pos_dim], rng)
    init_mlp(
        store, f"{prefix}.vel_head", [hidden - half, head_hidden, 2 * pos_dim], rng
    )


@dataclass(frozen=True)
class InitialEncoder:
    """GRU over ``y_5 .. y_1`` whose final state is split into two halves.

    The first half feeds the position head and the second the velocity head;
    each head emits a mean and a log-variance.
    """

    gru: GRU
    pos_head: MLP
    vel_head: MLP

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> InitialEncoder:
        return cls(
            GRU.from_params(params, f"{prefix}.gru"),
            MLP.from_params(params, f"{prefix}.pos_head", "relu"),
            MLP.from_params(params, f"{prefix}.vel_head", "relu"),
        )


def encode_initial(
    observations: np.ndarray,
    encoder: InitialEncoder,
) -> GaussianPosterior:
    """Posterior over ``h_1`` from the first five frames of every object.

    :param observations: shape ``(batch, time, objects, O)`` with ``time >= 5``
    :type observations: np.ndarray
    :raises InputError: fewer than five frames
    :return: posterior with tensors of shape ``(batch, objects, D)``
    :rtype: GaussianPosterior
    """
    batch, _, num, _ = np.shape(observations)
    sequence = _per_object(observations, INITIAL_PREFIX, "initial encoder")
    z = encoder.gru(sequence[:, ::-1, :])
    half = encoder.gru.hidden_dim // 2
    pos = encoder.pos_head(z[:, :half])
    vel = encoder.vel_head(z[:, half:])
    p = pos.shape[1] // 2
    mean = dm.concat([pos[:, :p], vel[:, :p]], axis=1)
    log_var = dm.concat([pos[:, p:], vel[:, p:]], axis=1)
    return GaussianPosterior(
        mean.reshape(batch, num, 2 * p),
        log_var.reshape(batch, num, 2 * p),
    )


# --------------------------------------------------------------------------------
# Global latent encoder
# --------------------------------------------------------------------------------


def init_global_encoder(
    store: ParamStore,
    prefix: str,
    obs_dim: int,
    global_dim: int,
    rng: np.random.Generator,
    hidden: int = GLOBAL_HIDDEN,
    head_hidden: int = HEAD_HIDDEN,
) -> None:
    init_gru(store, f"{prefix}.gru", obs_dim, hidden, rng)
    init_mlp(store, f"{prefix}.head", [hidden, head_hidden, 2 * global_dim], rng)


@dataclass(frozen=True)
class GlobalEncoder:
    gru: GRU
    head: MLP

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> GlobalEncoder:
        return cls(
            GRU.from_params(params, f"{prefix}.gru"),
            MLP.from_params(params, f"{prefix}.head", "elu"),
        )


def encode_global(
    observations: np.ndarray,
    encoder: GlobalEncoder,
) -> GaussianPosterior:
    """Posterior over ``c^a`` from the first 49 frames of every object.

    :raises InputError: the prefix is shorter than 49 frames
    :return: posterior with tensors of shape ``(batch, objects, C)``
    :rtype: GaussianPosterior
    """
    batch, _, num, _ = np.shape(observations)
    sequence = _per_object(observations, GLOBAL_PREFIX, "global encoder")
    out = encoder.head(encoder.gru(sequence))
    c = out.shape[1] // 2
    return GaussianPosterior(
        out[:, :c].reshape(batch, num, c),
        out[:, c:].reshape(batch, num, c),
    )
