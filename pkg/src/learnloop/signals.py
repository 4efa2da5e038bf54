"""Interaction events and the streaming feature pipeline.

Each event carries a feature vector with the channels listed in
``FEATURE_NAMES``.  Per student, vectors are exponentially smoothed, kept in a
ring buffer of the last ``window`` smoothed values, and aggregated by the
per-channel mean over that buffer.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import NoSignalError, ShapeError, ValidationError

FEATURE_NAMES = ("attempts", "exec_time_ms", "memory_kb", "difficulty", "gap_s")

DEFAULT_ALPHA = 0.3
DEFAULT_WINDOW = 10


class Channel(str, Enum):
    SUBMISSION = "submission"
    PARTICIPATION = "participation"
    QUERY = "query"


@dataclass(frozen=True)
class SignalEvent:
    """One timestamped interaction ``(t_i, z_i, y_i)`` of a single student."""

    student_id: str
    timestamp: int
    item_id: str
    skill_ids: tuple[str, ...]
    correct: int
    features: tuple[float, ...] = (0.0,) * len(FEATURE_NAMES)
    present: tuple[bool, ...] = (True,) * len(FEATURE_NAMES)
    channel: Channel = Channel.SUBMISSION

    def __post_init__(self):
        if not isinstance(self.timestamp, int) or self.timestamp <= 0:
            raise ValidationError(f"timestamp must be a positive integer, got {self.timestamp!r}")
        if self.correct not in (0, 1):
            raise ValidationError(f"correct must be 0 or 1, got {self.correct!r}")
        if not all(math.isfinite(v) for v in self.features):
            raise ValidationError("feature values must be finite")
        if len(self.present) != len(self.features):
            raise ShapeError("presence mask and features differ in length")
        if self.channel == Channel.SUBMISSION and not self.skill_ids:
            raise ValidationError(f"submission event for item {self.item_id!r} has no skills")

    @property
    def feature_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=float)


@dataclass
class SmootherState:
    alpha: float = DEFAULT_ALPHA
    window: int = DEFAULT_WINDOW
    last_smoothed: np.ndarray | None = None
    buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.window) != self.window or self.window < 1:
            raise ValidationError(f"window must be a positive integer, got {self.window}")
        self.window = int(self.window)
        self.buffer = deque(self.buffer, maxlen=self.window)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "window": self.window,
            "last_smoothed": None if self.last_smoothed is None else self.last_smoothed.tolist(),
            "buffer": [v.tolist() for v in self.buffer],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SmootherState":
        last = data.get("last_smoothed")
        return cls(
            alpha=data["alpha"],
            window=data["window"],
            last_smoothed=None if last is None else np.asarray(last, dtype=float),
            buffer=deque(np.asarray(v, dtype=float) for v in data.get("buffer", [])),
        )


def smooth(state: SmootherState, raw) -> np.ndarray:
    """Exponentially smooth ``raw`` into ``state`` and return the new value.

    The first vector seeds the state unchanged.  Later vectors give
    ``alpha * raw + (1 - alpha) * previous``.
    """
    raw = np.array(raw, dtype=float, ndmin=1)
    if state.last_smoothed is None:
        value = raw.copy()
    else:
        if raw.shape != state.last_smoothed.shape:
            raise ShapeError(f"expected shape {state.last_smoothed.shape}, got {raw.shape}")
        value = state.alpha * raw + (1.0 - state.alpha) * state.last_smoothed
    state.last_smoothed = value
    state.buffer.append(value)
    return value.copy()


def aggregate_window(state: SmootherState) -> np.ndarray:
    """Per-channel mean of the most recent ``min(window, available)`` smoothed vectors."""
    if not state.buffer:
        raise NoSignalError("no signal yet")
    recent = list(state.buffer)[-state.window:]
    return np.mean(np.stack(recent), axis=0)


def normalize(features) -> np.ndarray:
    """Column-wise z-score with population std; constant columns become zeros."""
    x = np.array(features, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    out = np.zeros_like(x)
    ok = ~degenerate
    out[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
    return out[:, 0] if squeeze else out
