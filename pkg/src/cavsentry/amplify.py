"""Amplification of readings next to abrupt jumps or flat plateaus."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .traces import LabeledWindowSet

MODES = ("multiply", "additive")


class AmplifierError(ValueError):
    pass


@dataclass(frozen=True)
class AmplifierConfig:
    """``multiply`` maps a triggered reading x to x + beta * x; ``additive`` to x + beta.

    ``alpha`` may be a scalar or one threshold per channel.
    """

    alpha: object = 1.0
    beta: float = 1.0
    mode: str = "multiply"

    def __post_init__(self):
        if np.any(np.asarray(self.alpha, dtype=float) <= 0):
            raise AmplifierError("alpha must be > 0")
        if self.beta <= 0:
            raise AmplifierError("beta must be > 0")
        if self.mode not in MODES:
            raise AmplifierError(f"mode must be one of {MODES}")

    def alpha_for(self, channel: int) -> float:
        a = np.asarray(self.alpha, dtype=float)
        return float(a) if a.ndim == 0 else float(a[channel])


def amplify_channel(readings, cfg: AmplifierConfig, alpha: float = None) -> np.ndarray:
    x = np.asarray(readings, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise AmplifierError("need a 1-D sequence of length >= 2")
    alpha = cfg.alpha_for(0) if alpha is None else alpha
    delta = np.abs(np.diff(x))
    trigger = (delta > alpha) | (delta == 0)
    out = x.copy()
    head = out[:-1]
    if cfg.mode == "multiply":
        head[trigger] = head[trigger] + cfg.beta * head[trigger]
    else:
        head[trigger] = head[trigger] + cfg.beta
    return out


def amplify_array(values: np.ndarray, cfg: AmplifierConfig) -> np.ndarray:
    """Vectorised amplify_channel over an (N, C, T) array, per-channel alpha."""
    values = np.asarray(values, dtype=np.float64)
    n_ch = values.shape[1]
    alpha = np.asarray(cfg.alpha, dtype=float)
    alpha = np.broadcast_to(alpha, (n_ch,))[None, :, None]
    delta = np.abs(np.diff(values, axis=2))
    trigger = (delta > alpha) | (delta == 0)
    out = values.copy()
    head = out[:, :, :-1]
    bump = cfg.beta * head if cfg.mode == "multiply" else cfg.beta
    head += np.where(trigger, bump, 0.0)
    return out


def amplify_windows(windows: LabeledWindowSet, cfg: AmplifierConfig) -> LabeledWindowSet:
    return replace(windows, values=amplify_array(windows.values, cfg))


def calibrate_alpha(train_normal: Iterable, k: float = 6.0) -> float:
    """alpha = mean(|d|) + k * std(|d|) over successive differences of normal data."""
    diffs = [np.abs(np.diff(np.asarray(s, dtype=np.float64))) for s in train_normal]
    diffs = [d for d in diffs if d.size]
    if not diffs:
        raise AmplifierError("need at least one sequence with 2 samples to calibrate alpha")
    d = np.concatenate(diffs)
    alpha = float(d.mean() + k * d.std())
    if alpha <= 0:
        raise AmplifierError("cannot calibrate alpha: normal data has no variation")
    return alpha


def calibrate_windows(windows: LabeledWindowSet, k: float = 6.0) -> np.ndarray:
    """Per-channel alpha from the normal-labelled windows of a training set."""
    normal = windows.values[windows.labels == 0]
    if len(normal) == 0:
        raise AmplifierError("no normal windows to calibrate alpha from")
    return np.array([calibrate_alpha(normal[:, c, :], k) for c in range(windows.n_channels)])
