from __future__ import annotations

import logging
from typing import Iterator

import numpy as np

from igpode.diffmath import Tape
from igpode.diffmath import Tensor
from igpode.errors import ContractError

logger = logging.getLogger(__name__)


class ParamStore:
    """Named trainable arrays.

    Names are dotted paths such as ``drift.f_s.q_mu``.  The store remembers the
    value each parameter was registered with so it can be reset, and binds all
    parameters to a tape as trainable leaves.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._initial: dict[str, np.ndarray] = {}

    # --------------------------------------------------------------------------------
    # Registration
    # --------------------------------------------------------------------------------

    def register(self, name: str, value) -> None:
        """Adds a parameter with its initial value

        :param name: dotted parameter name
        :type name: str
        :param value: initial value
        :type value: array-like
        """
        if name in self._values:
            raise ContractError(f"parameter '{name}' registered twice")
        value = np.array(value, dtype=np.float64)
        self._values[name] = value
        self._initial[name] = value.copy()
        logger.debug(f"registered {name} with shape {value.shape}")

    # --------------------------------------------------------------------------------
    # Access
    # --------------------------------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self, prefix: str = "") -> list[str]:
        """Returns the parameter names starting with ``prefix``."""
        return [name for name in self._values if name.startswith(prefix)]

    def get(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError as e:
            raise ContractError(
                f"The specified parameter ({name}) does not exist!"
                f" ({list(self._values)})",
            ) from e

    def set(self, name: str, value) -> None:
        """Replaces a parameter value; the shape must not change."""
        current = self.get(name)
        value = np.array(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ContractError(
                f"cannot set '{name}' of shape {current.shape} to shape {value.shape}",
            )
        self._values[name] = value

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._values)

    def update(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.set(name, value)

    def copy(self) -> ParamStore:
        other = ParamStore()
        for name, value in self._values.items():
            other._values[name] = value.copy()
            other._initial[name] = self._initial[name].copy()
        return other

    # --------------------------------------------------------------------------------
    # Reset and binding
    # --------------------------------------------------------------------------------

    def reset(self, name: str) -> None:
        """Restores a parameter to its registered value"""
        self.set(name, self._initial[name].copy())

    def reset_all(self) -> None:
        for name in self._values:
            self.reset(name)

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Places every parameter on ``tape`` as a trainable leaf"""
        return {name: tape.param(name, value) for name, value in self._values.items()}
