"""Class learning pace: windowed confident-prediction counts, margins, and scale.

Counts approximate, over a sliding window of recent steps, how many unlabeled
samples each class absorbed with confidence >= zeta. Margins grow for classes
the model rarely commits to: delta = 1 - beta with beta the max-normalized
counts, and the margin scale alpha_t = (max beta - min beta) * alpha_base
vanishes when all classes keep pace with each other.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Tuple

import numpy as np

DEFAULT_ZETA = 0.7
DEFAULT_ALPHA_BASE = 8.0


@dataclass
class PaceState:
    num_classes: int
    zeta: float = DEFAULT_ZETA
    alpha_base: float = DEFAULT_ALPHA_BASE
    window: int = 500  # steps; roughly one epoch of unlabeled traffic
    mode: str = "window"  # "window" or "ema"
    ema_decay: float = 0.999
    counts: np.ndarray = field(init=False)
    beta: np.ndarray = field(init=False)
    delta: np.ndarray = field(init=False)
    alpha_t: float = field(init=False)
    _buffer: Deque[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not (0.0 < self.zeta <= 1.0):
            raise ValueError("zeta must be in (0, 1]")
        if self.alpha_base < 0:
            raise ValueError("alpha_base must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.mode not in ("window", "ema"):
            raise ValueError("mode must be 'window' or 'ema'")
        self.counts = np.zeros(self.num_classes)
        self._buffer = deque()
        self.beta = np.zeros(self.num_classes)
        self.delta = np.ones(self.num_classes)
        self.alpha_t = self.alpha_base

    def update_counts(self, q_weak_batch: np.ndarray) -> None:
        """Fold one step of confident pseudo-label counts into the estimate."""
        q = np.asarray(q_weak_batch, dtype=np.float64)
        inc = np.zeros(self.num_classes)
        if q.size:
            conf = np.max(q, axis=1)
            winners = np.argmax(q, axis=1)
            keep = conf >= self.zeta
            if np.any(keep):
                inc = np.bincount(
                    winners[keep], minlength=self.num_classes
                ).astype(np.float64)
        if self.mode == "window":
            self._buffer.append(inc)
            self.counts = self.counts + inc
            if len(self._buffer) > self.window:
                self.counts = self.counts - self._buffer.popleft()
        else:
            self.counts = self.ema_decay * self.counts + (1.0 - self.ema_decay) * inc

    def refresh_margins(self) -> Tuple[np.ndarray, float]:
        """Recompute (beta, delta, alpha_t) from current counts."""
        top = float(np.max(self.counts))
        if top > 0.0:
            self.beta = self.counts / top
            self.delta = 1.0 - self.beta
            self.alpha_t = (float(np.max(self.beta)) - float(np.min(self.beta))) * self.alpha_base
        else:
            # cold start: full margins everywhere, behaviorally class-symmetric
            self.beta = np.zeros(self.num_classes)
            self.delta = np.ones(self.num_classes)
            self.alpha_t = self.alpha_base
        return self.delta, self.alpha_t


def update_counts(state: PaceState, q_weak_batch: np.ndarray) -> None:
    state.update_counts(q_weak_batch)


def refresh_margins(state: PaceState) -> Tuple[np.ndarray, float]:
    return state.refresh_margins()
