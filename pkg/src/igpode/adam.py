from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field

import numpy as np

from igpode.errors import ContractError
from igpode.errors import NonFiniteError


@dataclass
class AdamState:
    """Adam hyperparameters, step count and per-parameter moment estimates.

    :param lr: learning rate
    :type lr: float
    :param beta1: decay of the first moment, defaults to 0.9
    :type beta1: float
    :param beta2: decay of the second moment, defaults to 0.999
    :type beta2: float
    :param eps: denominator offset, defaults to 1e-8
    :type eps: float
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Neither ``params`` nor ``state`` is modified; updated copies are returned.

    :raises ContractError: parameter and gradient names differ, or shapes disagree
    :raises NonFiniteError: a gradient holds NaN or Inf; nothing is updated
    :return: updated parameters and optimizer state
    :rtype: tuple[dict[str, np.ndarray], AdamState]
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ContractError(f"parameter and gradient names differ: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(
                f"gradient for '{name}' has shape {g.shape}, "
                f"parameter has {params[name].shape}",
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient for '{name}' is not finite")

    step = state.step + 1
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v

    new_state = AdamState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step=step,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state
