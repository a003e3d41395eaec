"""Parameter layout of a latent ODE model and assembly of its parts.

Every trainable array lives in a :class:`~igpode.params.ParamStore` under a
dotted name:

* ``enc.h1.*``  initial value encoder
* ``enc.c.*``   global latent encoder (only with latent globals)
* ``emission.log_obs_var``  observation noise
* ``drift.f_s.*`` / ``drift.f_b.*``  interacting drifts
* ``drift.f.*``  black-box drift of the non-interacting baselines
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import replace
from typing import Mapping

import numpy as np

from igpode.config import GlobalLatents
from igpode.config import ModelConfig
from igpode.diffmath import Tensor
from igpode.dynamics import DriftKind
from igpode.dynamics import DriftModel
from igpode.dynamics import ObjectGraph
from igpode.dynamics import StateLayout
from igpode.dynamics import blackbox_dims
from igpode.dynamics import f_b_dims
from igpode.dynamics import f_s_dims
from igpode.encoders import GlobalEncoder
from igpode.encoders import InitialEncoder
from igpode.encoders import init_global_encoder
from igpode.encoders import init_initial_encoder
from igpode.errors import ConfigError
from igpode.gp import SparseGP
from igpode.gp import draw_pathwise
from igpode.gp import init_sparse_gp
from igpode.gp import kl_inducing
from igpode.layers import MLP
from igpode.layers import init_mlp
from igpode.params import ParamStore

logger = logging.getLogger(__name__)

INITIAL_ENCODER = "enc.h1"
GLOBAL_ENCODER = "enc.c"
OBS_VAR = "emission.log_obs_var"
ZERO_LOG_VARIANCE = -60.0


@dataclass(frozen=True)
class LatentODE:
    """Static description of a model: configuration, object graph and sizes.

    Parameters are not held here; they are passed in as tensors bound to a
    tape so the same model can be evaluated on many tapes at once.
    """

    config: ModelConfig
    graph: ObjectGraph
    obs_dim: int
    substeps: int = 1

    def __post_init__(self):
        if self.substeps < 1:
            raise ConfigError(f"substeps must be at least 1, got {self.substeps}")
        if not 1 <= self.obs_dim <= self.layout.latent_dim:
            raise ConfigError(
                f"observed dimension {self.obs_dim} must lie in "
                f"[1, {self.layout.latent_dim}]",
            )

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        num_objects: int,
        obs_dim: int,
        substeps: int = 1,
    ) -> LatentODE:
        """
        :param substeps: RK4 steps per observation interval, shared by
            training and forecasting
        :type substeps: int
        """
        graph = ObjectGraph.fully_connected(num_objects)
        return cls(config, graph, obs_dim, substeps)

    @property
    def kind(self) -> DriftKind:
        return self.config.kind

    @property
    def num_objects(self) -> int:
        return self.graph.num_objects

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.config.pos_dim, self.config.structured)

    @property
    def global_dim(self) -> int:
        return self.config.global_dim if self.config.uses_globals else 0

    def with_objects(self, num_objects: int) -> LatentODE:
        """Same parameters applied to a different object count.

        Only the interacting kinds have parameter shapes independent of the
        number of objects.
        """
        if not self.kind.interacting:
            raise ConfigError(
                f"a {self.kind.value} drift is tied to {self.num_objects} objects",
            )
        return replace(self, graph=ObjectGraph.fully_connected(num_objects))

    # --------------------------------------------------------------------------------
    # Initialisation
    # --------------------------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        cfg = self.config
        store = ParamStore()
        init_initial_encoder(store, INITIAL_ENCODER, self.obs_dim, cfg.pos_dim, rng)
        if cfg.global_latents is GlobalLatents.LATENT:
            init_global_encoder(
                store, GLOBAL_ENCODER, self.obs_dim, cfg.global_dim, rng
            )
        store.register(OBS_VAR, np.full(self.obs_dim, 2.0 * np.log(cfg.init_obs_std)))

        layout, c = self.layout, self.global_dim
        if self.kind.interacting:
            shapes = {
                "drift.f_s": (f_s_dims(layout, c), cfg.hidden_f_s),
                "drift.f_b": (f_b_dims(layout, c, cfg.pair_features), cfg.hidden_f_b),
            }
        else:
            shapes = {
                "drift.f": (blackbox_dims(layout, c, self.num_objects), cfg.hidden_f_s),
            }
        for prefix, ((fan_in, fan_out), hidden) in shapes.items():
            if self.kind.gaussian_process:
                init_sparse_gp(store, prefix, cfg.num_inducing, fan_in, fan_out, rng)
            else:
                init_mlp(store, prefix, [fan_in, hidden, hidden, fan_out], rng)
        logger.debug(
            f"initialised {self.kind.value} model with {len(store)} parameter arrays",
        )
        return store

    # --------------------------------------------------------------------------------
    # Assembly from bound parameters
    # --------------------------------------------------------------------------------

    def initial_encoder(self, params: Mapping[str, Tensor]) -> InitialEncoder:
        return InitialEncoder.from_params(params, INITIAL_ENCODER)

    def global_encoder(self, params: Mapping[str, Tensor]) -> GlobalEncoder:
        if self.config.global_latents is not GlobalLatents.LATENT:
            raise ConfigError("the model has no global latent encoder")
        return GlobalEncoder.from_params(params, GLOBAL_ENCODER)

    def _prefixes(self) -> tuple[str, ...]:
        return ("drift.f_s", "drift.f_b") if self.kind.interacting else ("drift.f",)

    def sparse_gps(self, params: Mapping[str, Tensor]) -> list[SparseGP]:
        if not self.kind.gaussian_process:
            return []
        return [
            SparseGP.from_params(params, prefix, self.config.jitter)
            for prefix in self._prefixes()
        ]

    def kl_u(self, params: Mapping[str, Tensor]) -> Tensor:
        """``KL[q(U) || p(U)]`` summed over the drift GPs, zero for MLP drifts."""
        tape = next(iter(params.values())).tape
        total = tape.constant(0.0)
        for gp in self.sparse_gps(params):
            total = total + kl_inducing(gp)
        return total

    def drift_model(
        self,
        params: Mapping[str, Tensor],
        rng: np.random.Generator,
    ) -> DriftModel:
        """Draws one concrete drift, held fixed for a whole rollout."""
        if self.kind.gaussian_process:
            functions = [
                draw_pathwise(gp, self.config.num_features, rng)
                for gp in self.sparse_gps(params)
            ]
        else:
            functions = [
                MLP.from_params(params, prefix, self.config.activation)
                for prefix in self._prefixes()
            ]
        f_s = functions[0]
        f_b = functions[1] if len(functions) > 1 else None
        return DriftModel(
            self.kind,
            f_s,
            f_b,
            self.graph,
            self.layout,
            self.config.pair_features,
        )


def zero_drift_store(store: ParamStore) -> ParamStore:
    """Copy of ``store`` whose drift outputs vanish.

    MLP drifts get a zero output layer.  GP drifts get zero inducing means,
    and variational and output variances pushed down to about ``exp(-60)``.
    """
    out = store.copy()
    for name in out.names("drift."):
        prefix, leaf = name.rsplit(".", 1)
        value = out.get(name)
        if leaf == "q_mu":
            out.set(name, np.zeros_like(value))
        elif leaf in ("q_s_raw", "log_variances"):
            out.set(name, np.full_like(value, ZERO_LOG_VARIANCE))
        elif leaf[0] in "wb" and leaf[1:].isdigit():
            layers = len(out.names(f"{prefix}.w"))
            if int(leaf[1:]) == layers - 1:
                out.set(name, np.zeros_like(value))
    return out
