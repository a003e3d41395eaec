"""Monte-Carlo evidence lower bound, the round-based training loop and
prediction.

For each Monte-Carlo sample an initial state, global latents and one concrete
drift are drawn, the drift is rolled out with RK4 and the trajectory is scored
under a Gaussian emission ``y = B h + e`` with ``B = [I, 0]``::

    elbo = ell - KL[q(H_1)] - KL[q(C)] - KL[q(U)]
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Mapping

import numpy as np

from igpode import diffmath as dm
from igpode.adam import AdamState
from igpode.adam import adam_step
from igpode.callbacks import TrainCallbacks
from igpode.config import ExperimentConfig
from igpode.config import GlobalLatents
from igpode.config import TrainConfig
from igpode.diffmath import Tape
from igpode.diffmath import Tensor
from igpode.encoders import GLOBAL_PREFIX
from igpode.encoders import GaussianPosterior
from igpode.encoders import encode_global
from igpode.encoders import encode_initial
from igpode.encoders import reparameterize
from igpode.errors import ConfigError
from igpode.errors import ContractError
from igpode.errors import DecompositionError
from igpode.errors import DimensionError
from igpode.errors import NonFiniteError
from igpode.errors import TrainingError
from igpode.model import OBS_VAR
from igpode.model import LatentODE
from igpode.odeint import TimeGrid
from igpode.odeint import default_substeps
from igpode.odeint import rk4_rollout
from igpode.params import ParamStore
from igpode.simdata import Dataset

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


# --------------------------------------------------------------------------------
# Emission and bound
# --------------------------------------------------------------------------------


@dataclass(frozen=True)
class EmissionModel:
    """Fixed projection onto the first ``O`` latent dims plus diagonal noise.

    :param log_obs_var: log of the per-dimension noise variances, shape ``(O,)``
    :type log_obs_var: Tensor
    """

    log_obs_var: Tensor

    @property
    def obs_dim(self) -> int:
        return self.log_obs_var.shape[0]

    @property
    def variance(self) -> Tensor:
        return dm.exp(self.log_obs_var)

    def project(self, states: Tensor) -> Tensor:
        if states.shape[-1] < self.obs_dim:
            raise DimensionError(
                f"latent dimension {states.shape[-1]} is smaller than the "
                f"{self.obs_dim} observed dims",
            )
        return states[..., : self.obs_dim]

    def log_likelihood(self, observations: np.ndarray, states: Tensor) -> Tensor:
        """``sum log N(y | B h, diag sigma2)`` over every frame, object and dim."""
        residual = observations - self.project(states)
        return -0.5 * (
            LOG_2PI + self.log_obs_var + residual * residual / self.variance
        ).sum()


@dataclass(frozen=True)
class ElboParts:
    ell: Tensor
    kl_h1: Tensor
    kl_c: Tensor
    kl_u: Tensor

    @property
    def elbo(self) -> Tensor:
        return self.ell - self.kl_h1 - self.kl_c - self.kl_u

    def record(self) -> dict[str, float]:
        return {
            "elbo": self.elbo.item(),
            "ell": self.ell.item(),
            "kl_h1": self.kl_h1.item(),
            "kl_c": self.kl_c.item(),
            "kl_u": self.kl_u.item(),
        }


def _global_posterior(
    model: LatentODE,
    params: Mapping[str, Tensor],
    observations: np.ndarray,
    global_prefix: np.ndarray | None,
    globals_obs: np.ndarray | None,
) -> tuple[GaussianPosterior | None, Tensor | None]:
    """Posterior over latent globals, or the observed globals as a constant."""
    tape = params[OBS_VAR].tape
    mode = model.config.global_latents
    if mode is GlobalLatents.LATENT:
        prefix = observations if global_prefix is None else global_prefix
        return encode_global(prefix, model.global_encoder(params)), None
    if mode is GlobalLatents.OBSERVED:
        if globals_obs is None:
            raise ConfigError("the model expects observed globals")
        expected = observations.shape[:1] + (model.num_objects, model.global_dim)
        if np.shape(globals_obs) != expected:
            raise DimensionError(
                f"observed globals must have shape {expected}, got "
                f"{np.shape(globals_obs)}",
            )
        return None, tape.constant(globals_obs)
    return None, None


def mc_elbo(
    observations: np.ndarray,
    model: LatentODE,
    params: Mapping[str, Tensor],
    grid: TimeGrid,
    num_samples: int,
    rng: np.random.Generator,
    global_prefix: np.ndarray | None = None,
    globals_obs: np.ndarray | None = None,
    kl_scale: float = 1.0,
) -> ElboParts:
    """Monte-Carlo estimate of the bound for a batch of sequences.

    :param observations: shape ``(batch, N, A, O)`` on the ``N`` points of ``grid``
    :type observations: np.ndarray
    :param model: model description
    :type model: LatentODE
    :param params: parameters bound to a tape
    :type params: Mapping[str, Tensor]
    :param grid: shared time grid
    :type grid: TimeGrid
    :param num_samples: Monte-Carlo sample count ``L``
    :type num_samples: int
    :param rng: source of every random draw
    :type rng: np.random.Generator
    :param global_prefix: frames the global encoder reads, defaults to
        ``observations``
    :type global_prefix: np.ndarray | None
    :param globals_obs: observed globals ``(batch, A, C)``
    :type globals_obs: np.ndarray | None
    :param kl_scale: weight of ``KL[q(U)]``, the batch share of the dataset
    :type kl_scale: float
    :raises IntegrationError: a rollout became non-finite
    :return: the expected log-likelihood and the three KL terms
    :rtype: ElboParts
    """
    observations = np.asarray(observations, dtype=np.float64)
    if num_samples < 1:
        raise ContractError(f"sample count must be positive, got {num_samples}")
    if observations.ndim != 4 or observations.shape[1] != len(grid):
        raise DimensionError(
            f"observations {observations.shape} do not match a grid of "
            f"{len(grid)} points",
        )
    tape = params[OBS_VAR].tape
    q_h1 = encode_initial(observations, model.initial_encoder(params))
    q_c, fixed_c = _global_posterior(
        model,
        params,
        observations,
        global_prefix,
        globals_obs,
    )
    emission = EmissionModel(params[OBS_VAR])

    ell = tape.constant(0.0)
    for _ in range(num_samples):
        h1 = reparameterize(q_h1, rng)
        c = reparameterize(q_c, rng) if q_c is not None else fixed_c
        drift = model.drift_model(params, rng)
        trajectory = rk4_rollout(h1, c, drift, grid)
        ell = ell + emission.log_likelihood(observations, trajectory)

    return ElboParts(
        ell=ell / float(num_samples),
        kl_h1=q_h1.kl(),
        kl_c=q_c.kl() if q_c is not None else tape.constant(0.0),
        kl_u=model.kl_u(params) * kl_scale,
    )


# --------------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    """Rounds of ``(subsequence length, iterations)`` sharing one learning rate."""

    rounds: tuple[tuple[int, int], ...]
    learning_rate: float

    @classmethod
    def from_config(cls, config: TrainConfig) -> TrainingSchedule:
        return cls(config.rounds, config.learning_rate)

    def check(self, num_steps: int) -> None:
        for length, _ in self.rounds:
            if length > num_steps:
                raise ContractError(
                    f"subsequence length {length} exceeds sequence length {num_steps}",
                )


@dataclass
class TrainState:
    """Everything a run needs to continue: parameters, optimizer and RNG.

    ``round_index`` counts completed rounds of the schedule.
    """

    model: LatentODE
    params: ParamStore
    adam: AdamState
    rng: np.random.Generator
    round_index: int = 0
    iteration: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)


def build_model(config: ExperimentConfig, dataset: Dataset) -> LatentODE:
    cfg = config.model
    if cfg.global_latents is GlobalLatents.OBSERVED:
        if dataset.globals is None:
            raise ConfigError("observed globals requested but the dataset has none")
        if dataset.global_dim != cfg.global_dim:
            raise ConfigError(
                f"dataset globals have {dataset.global_dim} dims, config expects "
                f"{cfg.global_dim}",
            )
    if cfg.global_latents is GlobalLatents.LATENT and dataset.num_steps < GLOBAL_PREFIX:
        raise ConfigError(
            f"latent globals need {GLOBAL_PREFIX} frames, sequences have "
            f"{dataset.num_steps}",
        )
    substeps = config.train.substeps
    if substeps is None:
        substeps = default_substeps(dataset.dt)
        logger.debug(f"{substeps} solver steps per interval for spacing {dataset.dt}")
    return LatentODE.build(cfg, dataset.num_objects, dataset.obs_dim, substeps)


def init_train_state(
    model: LatentODE,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> TrainState:
    params = model.init_params(rng)
    return TrainState(model, params, AdamState(lr=config.train.learning_rate), rng)


def _sample_batch(
    dataset: Dataset,
    length: int,
    batch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Random subsequences of ``length`` frames from ``batch`` distinct sequences.

    The global encoder prefix always comes from the start of the full sequence.
    """
    obs = dataset.observations
    indices = np.sort(rng.choice(dataset.num_sequences, size=batch, replace=False))
    starts = rng.integers(0, dataset.num_steps - length + 1, size=batch)
    windows = np.stack([obs[i, s : s + length] for i, s in zip(indices, starts)])
    prefix = None
    if dataset.num_steps >= GLOBAL_PREFIX:
        prefix = obs[indices, :GLOBAL_PREFIX]
    glob = None if dataset.globals is None else dataset.globals[indices]
    return indices, windows, prefix, glob


def train(
    dataset: Dataset,
    config: ExperimentConfig,
    rng: np.random.Generator,
    callbacks: TrainCallbacks | None = None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict[str, Any]]]:
    """Maximises the bound with Adam over the rounds of the schedule.

    Each iteration draws a minibatch of random subsequences.  An iteration whose
    rollout or loss is non-finite is skipped and logged; training is aborted
    after ``max_nonfinite`` consecutive failures.

    :raises ContractError: the dataset is empty or a round is longer than the
        sequences
    :raises TrainingError: too many consecutive non-finite iterations
    :return: final state and the per-iteration history
    :rtype: tuple[TrainState, list[dict[str, Any]]]
    """
    if dataset.num_sequences < 1:
        raise ContractError("training needs at least one sequence")
    train_cfg = config.train
    schedule = TrainingSchedule.from_config(train_cfg)
    schedule.check(dataset.num_steps)
    callbacks = callbacks or TrainCallbacks()
    if state is None:
        state = init_train_state(build_model(config, dataset), config, rng)
    model = state.model

    batch = min(train_cfg.batch_size, dataset.num_sequences)
    kl_scale = batch / dataset.num_sequences
    failures = 0

    for round_index, (length, iterations) in enumerate(schedule.rounds):
        if round_index < state.round_index:
            continue
        grid = TimeGrid.uniform(length, dataset.dt, model.substeps)
        logger.info(
            f"round {round_index}: {iterations} iterations on subsequences of "
            f"length {length}",
        )
        for _ in range(iterations):
            _, windows, prefix, glob = _sample_batch(dataset, length, batch, state.rng)
            record: dict[str, Any] = {
                "round": round_index,
                "iteration": state.iteration,
            }
            state.iteration += 1
            try:
                tape = Tape()
                params = state.params.bind(tape)
                parts = mc_elbo(
                    windows,
                    model,
                    params,
                    grid,
                    train_cfg.num_samples,
                    state.rng,
                    global_prefix=prefix,
                    globals_obs=glob,
                    kl_scale=kl_scale,
                )
                loss = dm.check_finite(-parts.elbo, "loss")
                grads = dm.grad(tape, loss)
                new_params, new_adam = adam_step(
                    state.adam,
                    state.params.as_dict(),
                    grads,
                )
            except (NonFiniteError, DecompositionError) as e:
                failures += 1
                record.update(skipped=True, error=str(e))
                state.history.append(record)
                logger.warning(f"iteration {record['iteration']} skipped: {e}")
                if failures >= train_cfg.max_nonfinite:
                    logger.error(
                        f"aborting after {failures} consecutive non-finite iterations",
                    )
                    raise TrainingError(
                        f"{failures} consecutive non-finite iterations in round "
                        f"{round_index}; last error: {e}",
                    ) from e
                callbacks.iteration(state, record)
                continue

            failures = 0
            state.params.update(new_params)
            state.adam = new_adam
            record.update(skipped=False, **parts.record())
            state.history.append(record)
            if state.iteration % train_cfg.log_every == 0:
                logger.info(
                    f"round {round_index} iter {record['iteration']}: "
                    f"elbo {record['elbo']:.3f} ell {record['ell']:.3f} "
                    f"kl_h1 {record['kl_h1']:.3f} kl_c {record['kl_c']:.3f} "
                    f"kl_u {record['kl_u']:.3f}",
                )
            callbacks.iteration(state, record)

        state.round_index = round_index + 1
        callbacks.round_end(state, round_index)
    return state, state.history


# --------------------------------------------------------------------------------
# Prediction
# --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """Predictive samples projected to the observation space.

    :param samples: noise-free paths ``B h``, shape ``(L, batch, N, A, O)``
    :type samples: np.ndarray
    :param latents: latent paths, shape ``(L, batch, N, A, D)``
    :type latents: np.ndarray
    :param obs_var: emission noise variances, shape ``(O,)``
    :type obs_var: np.ndarray
    """

    samples: np.ndarray
    latents: np.ndarray
    obs_var: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0)


def predict(
    model: LatentODE,
    params: ParamStore,
    observations: np.ndarray,
    grid: TimeGrid,
    num_samples: int,
    rng: np.random.Generator,
    globals_obs: np.ndarray | None = None,
) -> Prediction:
    """Encodes the prefix in ``observations`` and rolls out ``num_samples`` paths.

    Only the first frames that the encoders read are used: five for the
    initial state and 49 for latent globals.

    :raises InputError: the prefix is too short for an encoder
    """
    if num_samples < 1:
        raise ContractError(f"sample count must be positive, got {num_samples}")
    observations = np.asarray(observations, dtype=np.float64)
    tape = Tape(record=False)
    bound = params.bind(tape)
    q_h1 = encode_initial(observations, model.initial_encoder(bound))
    q_c, fixed_c = _global_posterior(model, bound, observations, None, globals_obs)
    emission = EmissionModel(bound[OBS_VAR])

    latents = []
    for _ in range(num_samples):
        h1 = reparameterize(q_h1, rng)
        c = reparameterize(q_c, rng) if q_c is not None else fixed_c
        drift = model.drift_model(bound, rng)
        latents.append(rk4_rollout(h1, c, drift, grid).value)
    latents = np.stack(latents)
    return Prediction(
        latents[..., : emission.obs_dim],
        latents,
        emission.variance.value.copy(),
    )
