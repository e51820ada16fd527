"""Online Early-Bird ticket detection over consecutive-epoch mask distances."""

from collections import deque
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError, InputError
from .pruning import ChannelMask, mask_distance


@dataclass
class EBDetectionResult:
    triggered: bool
    epoch: Optional[int] = None  # epoch whose mask is the ticket
    mask: Optional[ChannelMask] = None
    network: object = None  # snapshot of the dense network at ``epoch``
    fallback: bool = False


class EBDetector:
    """FIFO window of the last ``window`` mask distances.

    Each call to :meth:`step` corresponds to one finished training epoch.
    The detector fires when the window is full and every distance in it is
    strictly below ``epsilon``; the first possible trigger is therefore at
    epoch ``window + 1``.
    """

    def __init__(self, epsilon=0.1, window=5):
        if window < 1:
            raise ConfigError("detector window must be >= 1")
        if epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        self.epsilon = float(epsilon)
        self.window = int(window)
        self.reset()

    def reset(self):
        self.queue = deque(maxlen=self.window)
        self.prev_mask = None
        self.epoch = 0
        self.history = []  # (epoch, distance, max_window, triggered) per step after the first
        return self

    @property
    def max_window(self):
        return max(self.queue) if self.queue else None

    def observe_distance(self, distance):
        """Push one distance and report whether the window condition holds."""
        self.queue.append(float(distance))
        return len(self.queue) == self.window and max(self.queue) < self.epsilon

    def step(self, mask):
        """Feed the mask drawn at the end of the next epoch.

        Returns ``(distance, result)``; ``distance`` is None for the first mask.
        """
        self.epoch += 1
        if self.prev_mask is None:
            self.prev_mask = mask
            return None, EBDetectionResult(False)
        if len(mask) != len(self.prev_mask):
            raise InputError(f"mask length changed from {len(self.prev_mask)} to {len(mask)}")
        d = mask_distance(self.prev_mask, mask)
        self.prev_mask = mask
        fired = self.observe_distance(d)
        self.history.append((self.epoch, d, self.max_window, fired))
        if fired:
            return d, EBDetectionResult(True, self.epoch, mask)
        return d, EBDetectionResult(False)

    def state_dict(self):
        return {
            "epsilon": self.epsilon,
            "window": self.window,
            "queue": list(self.queue),
            "epoch": self.epoch,
            "history": [list(h) for h in self.history],
            "prev_mask": None if self.prev_mask is None else {
                "bits": self.prev_mask.bits.tolist(),
                "p": self.prev_mask.p,
                "source_epoch": self.prev_mask.source_epoch,
                "layer_sizes": list(self.prev_mask.layer_sizes),
            },
        }

    @classmethod
    def from_state_dict(cls, state):
        det = cls(state["epsilon"], state["window"])
        det.queue.extend(state["queue"])
        det.epoch = state["epoch"]
        det.history = [tuple(h) for h in state.get("history", [])]
        pm = state["prev_mask"]
        if pm is not None:
            det.prev_mask = ChannelMask(pm["bits"], pm["p"], pm["source_epoch"], tuple(pm["layer_sizes"]))
        return det


def retroactive_detect(masks, window=5, epsilon=0.1):
    """Replay a saved mask sequence through a fresh detector."""
    det = EBDetector(epsilon, window)
    for mask in masks:
        _, result = det.step(mask)
        if result.triggered:
            return result
    return EBDetectionResult(False)
