from __future__ import annotations

from typing import TYPE_CHECKING
from typing import Any
from typing import Callable

if TYPE_CHECKING:
    from igpode.inference import TrainState

IterationCallback = Callable[["TrainState", dict[str, Any]], None]
RoundEndCallback = Callable[["TrainState", int], None]


class TrainCallbacks:
    """Holds the optional hooks a training run calls, so only one object needs to
    be passed around

        :param on_iteration: called after every iteration with its history record,
            defaults to None
        :type on_iteration: IterationCallback | None, optional
        :param on_round_end: called after each schedule round with the round index,
            defaults to None
        :type on_round_end: RoundEndCallback | None, optional
    """

    __slots__ = [
        "_on_iteration",
        "_on_round_end",
    ]

    def __init__(
        self,
        on_iteration: IterationCallback | None = None,
        on_round_end: RoundEndCallback | None = None,
    ):
        self._on_iteration = on_iteration
        self._on_round_end = on_round_end

    @property
    def on_iteration(self) -> IterationCallback | None:
        """per-iteration hook

        :return: call back function
        :rtype: Optional[IterationCallback]
        """
        return self._on_iteration

    @property
    def on_round_end(self) -> RoundEndCallback | None:
        """end-of-round hook, used to write checkpoints

        :return: call back function
        :rtype: Optional[RoundEndCallback]
        """
        return self._on_round_end

    def iteration(self, state: TrainState, record: dict[str, Any]) -> None:
        if self._on_iteration is not None:
            self._on_iteration(state, record)

    def round_end(self, state: TrainState, round_index: int) -> None:
        if self._on_round_end is not None:
            self._on_round_end(state, round_index)
