"""Forecast metrics computed from predictive samples.

``samples`` always carry the sample axis first: ``(L, N, A, O)`` for one
sequence against ``truth`` of shape ``(N, A, O)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field

import numpy as np

from igpode.errors import ContractError
from igpode.errors import DimensionError

VARIANCE_FLOOR = 1e-6


def _check(truth: np.ndarray, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != truth.ndim + 1 or samples.shape[1:] != truth.shape:
        raise DimensionError(
            f"samples {samples.shape} do not match truth {truth.shape}",
        )
    if samples.shape[0] < 1:
        raise ContractError("at least one sample is needed")
    return truth, samples


def mse_metric(truth: np.ndarray, samples: np.ndarray) -> float:
    """Squared error summed over observed dims, averaged over samples, frames
    and objects.
    """
    truth, samples = _check(truth, samples)
    return float(((samples - truth) ** 2).sum(axis=-1).mean())


def horizon_mse(truth: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Per-frame version of :func:`mse_metric`, shape ``(N,)``."""
    truth, samples = _check(truth, samples)
    return ((samples - truth) ** 2).sum(axis=-1).mean(axis=(0, 2))


def ell_metric(
    truth: np.ndarray,
    samples: np.ndarray,
    floor: float = VARIANCE_FLOOR,
) -> float:
    """Average log-density of ``truth`` under Gaussians fitted to the samples.

    Mean and unbiased variance are taken across samples per element, with the
    variance floored at ``floor``; log-densities are summed over observed dims
    and averaged over frames and objects.

    :raises ContractError: fewer than two samples
    """
    truth, samples = _check(truth, samples)
    if samples.shape[0] < 2:
        raise ContractError("the ELL metric needs at least two samples")
    mean = samples.mean(axis=0)
    var = np.maximum(samples.var(axis=0, ddof=1), floor)
    log_density = -0.5 * (np.log(2.0 * np.pi * var) + (truth - mean) ** 2 / var)
    return float(log_density.sum(axis=-1).mean())


@dataclass
class MetricReport:
    """Per-sequence metrics on the full window and on the frames after the
    encoder prefix, plus the horizon-resolved MSE curve.
    """

    mse: list[float] = field(default_factory=list)
    ell: list[float] = field(default_factory=list)
    mse_post: list[float] = field(default_factory=list)
    ell_post: list[float] = field(default_factory=list)
    horizon: list[np.ndarray] = field(default_factory=list)

    def add(self, truth: np.ndarray, samples: np.ndarray, prefix: int) -> None:
        self.mse.append(mse_metric(truth, samples))
        self.ell.append(ell_metric(truth, samples))
        self.mse_post.append(mse_metric(truth[prefix:], samples[:, prefix:]))
        self.ell_post.append(ell_metric(truth[prefix:], samples[:, prefix:]))
        self.horizon.append(horizon_mse(truth, samples))

    def __len__(self) -> int:
        return len(self.mse)

    @staticmethod
    def _stats(values: list[float]) -> dict[str, float]:
        values = np.asarray(values, dtype=np.float64)
        return {"mean": float(values.mean()), "std": float(values.std())}

    def summary(self) -> dict[str, dict[str, float]]:
        if not self.mse:
            raise ContractError("no sequences have been evaluated")
        return {
            "mse": self._stats(self.mse),
            "ell": self._stats(self.ell),
            "mse_post_prefix": self._stats(self.mse_post),
            "ell_post_prefix": self._stats(self.ell_post),
        }

    def horizon_curve(self) -> list[float]:
        return np.mean(np.stack(self.horizon), axis=0).tolist()
