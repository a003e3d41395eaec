from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from igpode import diffmath as dm
from igpode.diffmath import Tensor
from igpode.dynamics import DriftModel
from igpode.dynamics import drift
from igpode.errors import ContractError
from igpode.errors import IntegrationError

logger = logging.getLogger(__name__)

FINE_SPACING = 0.05


def default_substeps(dt: float) -> int:
    """RK4 steps per observation interval for data sampled every ``dt``.

    Spacings up to ``FINE_SPACING`` take one step; coarser ones take two so
    collisions between samples are not skipped over.
    """
    if dt <= 0:
        raise ContractError(f"sample spacing must be positive, got {dt}")
    return 1 if dt <= FINE_SPACING * (1.0 + 1e-9) else 2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform observation times with ``substeps`` RK4 steps per interval.

    :param times: strictly increasing, uniformly spaced time points
    :type times: np.ndarray
    :param substeps: solver steps per observation interval, at least 1
    :type substeps: int
    """

    times: np.ndarray
    substeps: int = 1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or len(times) < 1:
            raise ContractError("a time grid needs at least one time point")
        if self.substeps < 1:
            raise ContractError(f"substeps must be at least 1, got {self.substeps}")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ContractError("time points must be strictly increasing")
        if len(steps) and not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ContractError("time points must be uniformly spaced")

    @classmethod
    def uniform(cls, num: int, dt: float, substeps: int = 1, start: float = 0.0):
        return cls(start + dt * np.arange(num), substeps)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def step_size(self) -> float:
        return self.dt / self.substeps

    def truncate(self, num: int) -> TimeGrid:
        return TimeGrid(self.times[:num], self.substeps)


def rk4_step(fn: Callable[[Tensor], Tensor], h: Tensor, step: float) -> Tensor:
    k1 = fn(h)
    k2 = fn(h + (0.5 * step) * k1)
    k3 = fn(h + (0.5 * step) * k2)
    k4 = fn(h + step * k3)
    return h + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    fn: Callable[[Tensor], Tensor],
    h1: Tensor,
    grid: TimeGrid,
    axis: int = 0,
) -> Tensor:
    """Classical RK4 of an autonomous ``fn`` over ``grid``.

    The result stacks the state at every grid time, the initial state first,
    along ``axis``.

    :raises IntegrationError: the state becomes non-finite
    """
    if not dm.is_finite(h1):
        raise IntegrationError("initial state is not finite", 0)
    states = [h1]
    h = h1
    step = grid.step_size
    substep = 0
    for _ in range(len(grid) - 1):
        for _ in range(grid.substeps):
            h = rk4_step(fn, h, step)
            substep += 1
            if not dm.is_finite(h):
                raise IntegrationError("state became non-finite", substep)
        states.append(h)
    return dm.stack(states, axis=axis)


def rk4_rollout(
    h1: Tensor,
    globals_: Tensor | None,
    model: DriftModel,
    grid: TimeGrid,
) -> Tensor:
    """Rolls the drift forward from ``h1`` of shape ``(batch, objects, D)``.

    :return: trajectory of shape ``(batch, len(grid), objects, D)``
    :rtype: Tensor
    """
    return integrate(lambda h: drift(h, globals_, model), h1, grid, axis=1)
