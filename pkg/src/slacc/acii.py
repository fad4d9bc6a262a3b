"""Adaptive channel importance identification.

Each channel of a smashed tensor is min-max normalised to [0, 1], pushed
through a softmax, and scored by the Shannon entropy of the result. The score
used for compression blends the current entropy with the mean of the last
``k`` rounds, shifting weight towards history as training progresses
(``alpha = t / T``).
"""
from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import SmashedData


class StateError(ValueError):
    pass


def normalize_channel(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot normalise an empty channel")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def softmax_distribution(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    e = np.exp(v - v.max())
    return e / e.sum()


def _log_factor(base) -> float:
    if base in (None, "e", math.e):
        return 1.0
    if base == 2 or base == "2":
        return math.log(2.0)
    base = float(base)
    if base <= 1.0:
        raise ValueError(f"log base must exceed 1, got {base}")
    return math.log(base)


def _softmax_entropy(normalized: np.ndarray, axis=-1) -> np.ndarray:
    # H = log Z - sum(p * u) with u = v - max(v); avoids log of tiny p.
    u = normalized - normalized.max(axis=axis, keepdims=True)
    e = np.exp(u)
    z = e.sum(axis=axis)
    h = np.log(z) - (e * u).sum(axis=axis) / z
    return np.clip(h, 0.0, math.log(normalized.shape[axis]))


def instantaneous_entropy(channel, base="e", constant_is_zero: bool = False) -> float:
    """Entropy of ``softmax(normalize(channel))``, in units of ``base``.

    A constant channel normalises to all zeros, whose softmax is uniform, so
    it scores the maximum ``log N``. ``constant_is_zero`` flips that to 0.
    """
    v = np.asarray(channel, dtype=np.float64).reshape(-1)
    if constant_is_zero and v.size and v.min() == v.max():
        return 0.0
    return float(_softmax_entropy(normalize_channel(v))) / _log_factor(base)


def channel_entropies(channels: np.ndarray, base="e", constant_is_zero: bool = False) -> np.ndarray:
    """Vectorised :func:`instantaneous_entropy` over the rows of a ``[C, N]`` array."""
    x = np.asarray(channels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("expected a non-empty [C, N] array")
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    flat = span[:, 0] == 0
    norm = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    h = _softmax_entropy(norm, axis=1) / _log_factor(base)
    if constant_is_zero:
        h[flat] = 0.0
    return h


def alpha_schedule(t: int, T: int) -> float:
    if T < 1:
        raise ValueError("total rounds T must be >= 1")
    if not 0 <= t <= T:
        raise ValueError(f"round index {t} outside [0, {T}]")
    return t / T


def blend_entropy(h_now: float, h_hist: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * h_now + alpha * h_hist


class EntropyState:
    """Per-channel ring buffers of past instantaneous entropies.

    Single writer: callers serialise :func:`score_channels` per instance.
    """

    def __init__(self, num_channels: int, window: int = 5):
        if num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.history = [deque(maxlen=window) for _ in range(num_channels)]
        self.last_scores = np.zeros(num_channels)

    @property
    def num_channels(self) -> int:
        return len(self.history)

    def push(self, entropies) -> None:
        for buf, h in zip(self.history, entropies):
            buf.append(float(h))

    def copy(self) -> "EntropyState":
        return copy.deepcopy(self)


def historical_entropy(state: EntropyState, c: int) -> float:
    if not 0 <= c < state.num_channels:
        raise IndexError(f"channel {c} out of range for {state.num_channels} channels")
    buf = state.history[c]
    if not buf:
        return 0.0
    return math.fsum(buf) / len(buf)


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    scores: np.ndarray
    round: int
    instantaneous: np.ndarray
    historical: np.ndarray
    alpha: float

    def __len__(self):
        return len(self.scores)


def score_channels(
    s: SmashedData,
    state: EntropyState,
    t: int,
    T: int,
    base="e",
    constant_is_zero: bool = False,
) -> ImportanceVector:
    """Blend current and historical entropy per channel, then record the current one."""
    if state.num_channels != s.num_channels:
        raise StateError(
            f"entropy state tracks {state.num_channels} channels, data has {s.num_channels}"
        )
    alpha = alpha_schedule(t, T)
    h_now = channel_entropies(s.channels(), base=base, constant_is_zero=constant_is_zero)
    h_hist = np.array([historical_entropy(state, c) for c in range(state.num_channels)])
    scores = (1.0 - alpha) * h_now + alpha * h_hist
    state.push(h_now)
    state.last_scores = scores.copy()
    return ImportanceVector(scores=scores, round=t, instantaneous=h_now, historical=h_hist, alpha=alpha)
