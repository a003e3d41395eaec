from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Any

from igpode.dynamics import DriftKind
from igpode.dynamics import PairFeatures
from igpode.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "IGPODE_THREADS"


class GlobalLatents(str, Enum):
    OFF = "off"
    LATENT = "latent"
    OBSERVED = "observed"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a latent ODE model.

    :param kind: drift family
    :type kind: DriftKind
    :param structured: position/velocity state with ``ds/dt = v`` built in
    :type structured: bool
    :param pos_dim: position dimensions per object; the latent state has twice
        as many
    :type pos_dim: int
    :param global_latents: how per-object static features enter the drift
    :type global_latents: GlobalLatents
    :param global_dim: size of the per-object global feature
    :type global_dim: int
    """

    kind: DriftKind = DriftKind.IGPODE
    structured: bool = True
    pos_dim: int = 2
    global_latents: GlobalLatents = GlobalLatents.OFF
    global_dim: int = 1
    pair_features: PairFeatures = PairFeatures.DIFFERENCE
    num_inducing: int = 250
    num_features: int = 256
    jitter: float = 1e-5
    hidden_f_s: int = 256
    hidden_f_b: int = 512
    activation: str = "softplus"
    init_obs_std: float = 0.1

    def __post_init__(self):
        for name, enum in (
            ("kind", DriftKind),
            ("global_latents", GlobalLatents),
            ("pair_features", PairFeatures),
        ):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError as e:
                raise ConfigError(f"invalid {name} '{getattr(self, name)}'") from e
        if self.pos_dim < 1:
            raise ConfigError(f"pos_dim must be positive, got {self.pos_dim}")
        if self.num_inducing < 1 or self.num_features < 1:
            raise ConfigError("inducing point and feature counts must be positive")
        if self.init_obs_std <= 0:
            raise ConfigError("observation noise must be positive")
        if self.pair_features is PairFeatures.DIFFERENCE and not self.structured:
            if self.kind.interacting:
                raise ConfigError("difference pair features need a structured state")

    @property
    def uses_globals(self) -> bool:
        return self.global_latents is not GlobalLatents.OFF


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``rounds`` lists ``(subsequence length, iterations)``; each round restarts
    from the previous round's parameters.  ``substeps`` left as ``None`` is
    picked from the sample spacing of the training data.
    """

    rounds: tuple[tuple[int, int], ...] = ((5, 2000), (16, 1000), (33, 1000))
    learning_rate: float = 5e-4
    batch_size: int = 10
    num_samples: int = 1
    eval_samples: int = 20
    substeps: int | None = None
    seed: int = 0
    log_every: int = 50
    max_nonfinite: int = 3

    def __post_init__(self):
        rounds = tuple((int(length), int(iters)) for length, iters in self.rounds)
        object.__setattr__(self, "rounds", rounds)
        for length, iters in rounds:
            if length < 2 or iters < 0:
                raise ConfigError(f"invalid round ({length}, {iters})")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.num_samples < 1:
            raise ConfigError("batch size and sample count must be positive")
        if self.substeps is not None and self.substeps < 1:
            raise ConfigError(f"substeps must be positive, got {self.substeps}")
        if self.max_nonfinite < 1:
            raise ConfigError("max_nonfinite must be at least 1")


def _from_mapping(cls, values: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    return cls(**values)


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> ExperimentConfig:
        unknown = sorted(set(values) - {"model", "train"})
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        return cls(
            _from_mapping(ModelConfig, dict(values.get("model", {})), "model"),
            _from_mapping(TrainConfig, dict(values.get("train", {})), "train"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        """Loads a JSON file with optional ``model`` and ``train`` sections"""
        path = Path(path)
        try:
            values = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        logger.debug(f"loaded config from {path}")
        return cls.from_dict(values)

    def to_dict(self) -> dict[str, Any]:
        return {
            section: {k: _plain(v) for k, v in asdict(getattr(self, section)).items()}
            for section in ("model", "train")
        }

    def with_model(self, **changes) -> ExperimentConfig:
        return replace(self, model=replace(self.model, **changes))

    def with_train(self, **changes) -> ExperimentConfig:
        return replace(self, train=replace(self.train, **changes))


def thread_count() -> int:
    """Worker threads allowed by ``IGPODE_THREADS``, defaulting to the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        count = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from e
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {count}")
    return count
