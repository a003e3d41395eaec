from __future__ import annotations


class IgpodeError(Exception):
    """Base class for every error raised by igpode."""


class DimensionError(IgpodeError, ValueError):
    """Operand shapes do not agree."""


class ContractError(IgpodeError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DecompositionError(IgpodeError):
    """A matrix could not be factorised, even after jitter escalation."""


class NonFiniteError(IgpodeError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class DriftError(NonFiniteError):
    """The drift produced a non-finite time differential.

    :param message: description of the failure
    :type message: str
    :param object_index: index of the first object with a non-finite output
    :type object_index: int
    """

    def __init__(self, message: str, object_index: int):
        super().__init__(f"{message} (object {object_index})")
        self.object_index = object_index


class IntegrationError(NonFiniteError):
    """The ODE state became non-finite during a rollout.

    :param message: description of the failure
    :type message: str
    :param step: index of the failing solver substep
    :type step: int
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (substep {step})")
        self.step = step


class InputError(IgpodeError, ValueError):
    """Observations handed to an encoder or predictor are unusable."""


class ConfigError(IgpodeError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(IgpodeError):
    """A dataset or checkpoint file is malformed.

    :param message: description of the failure
    :type message: str
    :param offset: byte offset at which the problem was detected
    :type offset: int
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SimulationError(IgpodeError):
    """A ground-truth simulator could not produce a valid trajectory."""


class TrainingError(IgpodeError):
    """Training had to be aborted."""
