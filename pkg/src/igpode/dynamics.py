"""Interaction drift ``dH/dt``.

For every object ``a`` the drift is an independent-kinematics term plus a sum
of pairwise messages from its neighbours::

    dh^a = f_s(h^a, c^a) + sum_{a' in N_a} f_b(pair(h^a, h^a', c^a, c^a'))

With a structured state ``h^a = [s^a, v^a]`` the functions output accelerations
and the position slots receive ``v^a`` unchanged.  The non-interacting
baselines apply a single function to the concatenated state of all objects.

States are tensors of shape ``(batch, objects, D)``; globals, when present,
have shape ``(batch, objects, C)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable
from typing import Optional

import numpy as np

from igpode import diffmath as dm
from igpode.diffmath import Tensor
from igpode.errors import ConfigError
from igpode.errors import DimensionError
from igpode.errors import DriftError
from igpode.gp import SEKernel
from igpode.gp import se_kernel_matrix

logger = logging.getLogger(__name__)

VectorField = Callable[[Tensor], Tensor]


class DriftKind(str, Enum):
    IGPODE = "igpode"
    GPODE = "gpode"
    INODE = "inode"
    NODE = "node"

    @property
    def interacting(self) -> bool:
        return self in (DriftKind.IGPODE, DriftKind.INODE)

    @property
    def gaussian_process(self) -> bool:
        return self in (DriftKind.IGPODE, DriftKind.GPODE)


class PairFeatures(str, Enum):
    DIFFERENCE = "difference"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class ObjectGraph:
    """Neighbour sets of ``num_objects`` objects; no self-loops allowed."""

    num_objects: int
    neighbors: tuple[frozenset, ...]

    def __post_init__(self):
        if len(self.neighbors) != self.num_objects:
            raise ConfigError(
                f"{len(self.neighbors)} neighbour sets for {self.num_objects} objects",
            )
        for a, nbrs in enumerate(self.neighbors):
            if a in nbrs:
                raise ConfigError(f"object {a} lists itself as a neighbour")
            if any(not 0 <= b < self.num_objects for b in nbrs):
                raise ConfigError(f"object {a} has an out-of-range neighbour")

    @classmethod
    def fully_connected(cls, num_objects: int) -> ObjectGraph:
        return cls(
            num_objects,
            tuple(
                frozenset(b for b in range(num_objects) if b != a)
                for a in range(num_objects)
            ),
        )

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(receivers, senders)``: one entry per ``a' in N_a``."""
        pairs = [
            (a, b) for a in range(self.num_objects) for b in sorted(self.neighbors[a])
        ]
        receivers = np.array([a for a, _ in pairs], dtype=np.intp)
        senders = np.array([b for _, b in pairs], dtype=np.intp)
        return receivers, senders

    def incidence(self) -> np.ndarray:
        """``(objects, edges)`` matrix summing edge messages into receivers."""
        receivers, _ = self.edges()
        out = np.zeros((self.num_objects, len(receivers)))
        out[receivers, np.arange(len(receivers))] = 1.0
        return out


@dataclass(frozen=True)
class StateLayout:
    """Latent state per object: ``D = 2 * pos_dim``.

    When ``structured`` the first half is position and the second velocity.
    """

    pos_dim: int
    structured: bool = True

    @property
    def latent_dim(self) -> int:
        return 2 * self.pos_dim

    @property
    def function_output_dim(self) -> int:
        return self.pos_dim if self.structured else self.latent_dim


def f_s_dims(layout: StateLayout, global_dim: int) -> tuple[int, int]:
    return layout.latent_dim + global_dim, layout.function_output_dim


def f_b_dims(
    layout: StateLayout,
    global_dim: int,
    mode: PairFeatures,
) -> tuple[int, int]:
    if mode is PairFeatures.DIFFERENCE:
        inputs = layout.pos_dim + layout.latent_dim
    else:
        inputs = 2 * layout.latent_dim
    return inputs + 2 * global_dim, layout.function_output_dim


def blackbox_dims(
    layout: StateLayout,
    global_dim: int,
    num_objects: int,
) -> tuple[int, int]:
    return (
        num_objects * (layout.latent_dim + global_dim),
        num_objects * layout.function_output_dim,
    )


@dataclass(frozen=True)
class DriftModel:
    """A sampled drift: the functions are fixed for the whole rollout.

    For the non-interacting kinds ``f_s`` is the single black-box function on
    the concatenated state and ``f_b`` is None.
    """

    kind: DriftKind
    f_s: VectorField
    f_b: Optional[VectorField]
    graph: ObjectGraph
    layout: StateLayout
    pair_mode: PairFeatures = PairFeatures.DIFFERENCE


def pair_features(
    h_a: Tensor,
    h_b: Tensor,
    c_a: Tensor | None,
    c_b: Tensor | None,
    layout: StateLayout,
    mode: PairFeatures = PairFeatures.DIFFERENCE,
) -> Tensor:
    """Input of the interaction function for receiver ``a`` and sender ``b``.

    The difference parameterisation gives ``[s^a - s^b, v^a, v^b, c^a, c^b]``,
    so positions only enter relative to each other.

    :raises ConfigError: difference features requested for an unstructured state
    """
    if mode is PairFeatures.DIFFERENCE:
        if not layout.structured:
            raise ConfigError("difference pair features need a structured state")
        p = layout.pos_dim
        parts = [h_a[..., :p] - h_b[..., :p], h_a[..., p:], h_b[..., p:]]
    else:
        parts = [h_a, h_b]
    if c_a is not None and c_b is not None:
        parts += [c_a, c_b]
    return dm.concat(parts, axis=-1)


def _check_objects(out: Tensor, what: str) -> None:
    ok = np.all(np.isfinite(out.value), axis=-1)
    if not np.all(ok):
        object_index = int(np.argwhere(~ok)[0][1])
        raise DriftError(f"{what} produced a non-finite output", object_index)


def _with_globals(state: Tensor, globals_: Tensor | None) -> Tensor:
    return state if globals_ is None else dm.concat([state, globals_], axis=-1)


def _interaction_terms(
    state: Tensor,
    globals_: Tensor | None,
    model: DriftModel,
) -> Tensor:
    batch, num, _ = state.shape
    independent = model.f_s(_with_globals(state, globals_).reshape(batch * num, -1))
    independent = independent.reshape(batch, num, -1)
    _check_objects(independent, "f_s")

    receivers, _ = model.graph.edges()
    if len(receivers) == 0 or model.f_b is None:
        return independent
    return independent + interaction_sum(state, globals_, model)


def interaction_sum(
    state: Tensor,
    globals_: Tensor | None,
    model: DriftModel,
) -> Tensor:
    """Summed pairwise messages per object, shape ``(batch, objects, out)``."""
    batch = state.shape[0]
    receivers, senders = model.graph.edges()
    h_a = dm.take(state, receivers, axis=1)
    h_b = dm.take(state, senders, axis=1)
    c_a = c_b = None
    if globals_ is not None:
        c_a = dm.take(globals_, receivers, axis=1)
        c_b = dm.take(globals_, senders, axis=1)
    pairs = pair_features(h_a, h_b, c_a, c_b, model.layout, model.pair_mode)
    messages = model.f_b(pairs.reshape(batch * len(receivers), -1))
    messages = messages.reshape(batch, len(receivers), -1)

    ok = np.all(np.isfinite(messages.value), axis=(0, 2))
    if not np.all(ok):
        raise DriftError(
            "f_b produced a non-finite message",
            int(receivers[np.argmin(ok)]),
        )
    return model.graph.incidence() @ messages


def drift(state: Tensor, globals_: Tensor | None, model: DriftModel) -> Tensor:
    """Time differential of ``state``, shape ``(batch, objects, D)``.

    :raises DimensionError: state shape does not fit the model
    :raises DriftError: a function output is NaN or Inf
    """
    if state.ndim != 3:
        raise DimensionError(f"state must be (batch, objects, D), got {state.shape}")
    batch, num, dim = state.shape
    if num != model.graph.num_objects:
        raise DimensionError(
            f"state has {num} objects, graph has {model.graph.num_objects}",
        )
    if dim != model.layout.latent_dim:
        raise DimensionError(
            f"state dimension {dim} differs from latent dimension "
            f"{model.layout.latent_dim}",
        )

    if model.kind.interacting:
        accel = _interaction_terms(state, globals_, model)
    else:
        inputs = _with_globals(state, globals_).reshape(batch, -1)
        accel = model.f_s(inputs).reshape(batch, num, -1)
        _check_objects(accel, "drift")

    if model.layout.structured:
        return dm.concat([state[..., model.layout.pos_dim :], accel], axis=-1)
    return accel


def induced_kernel(
    state_p: np.ndarray,
    state_r: np.ndarray,
    p: int,
    r: int,
    graph: ObjectGraph,
    kernel: SEKernel,
    layout: StateLayout,
    d: int = 0,
    globals_p: np.ndarray | None = None,
    globals_r: np.ndarray | None = None,
    mode: PairFeatures = PairFeatures.DIFFERENCE,
) -> float:
    """Covariance of the summed interaction terms of object ``p`` in ``state_p``
    and object ``r`` in ``state_r`` under the ``f_b`` prior.

    ``k(h^p, h^r) = sum_{p' in N_p} sum_{r' in N_r} k_b(pair(p, p'), pair(r, r'))``
    """
    tape = kernel.log_lengthscales.tape

    def pairs(state, obj, glob):
        nbrs = sorted(graph.neighbors[obj])
        h = dm.as_tensor(tape, state)
        c_a = c_b = None
        if glob is not None:
            c = dm.as_tensor(tape, glob)
            c_a, c_b = dm.take(c, [obj] * len(nbrs), axis=0), dm.take(c, nbrs, axis=0)
        return pair_features(
            dm.take(h, [obj] * len(nbrs), axis=0),
            dm.take(h, nbrs, axis=0),
            c_a,
            c_b,
            layout,
            mode,
        )

    if not graph.neighbors[p] or not graph.neighbors[r]:
        return 0.0
    x_p = pairs(state_p, p, globals_p)
    x_r = pairs(state_r, r, globals_r)
    return float(se_kernel_matrix(x_p, x_r, kernel, d).value.sum())
