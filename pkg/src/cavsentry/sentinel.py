"""Per-sensor scalar Kalman filters that flag readings far from their prediction.

Each sensor gets a random-walk filter (x_t = x_{t-1} + w). Before a reading is
folded in, the filter's prediction is compared with it; a gap above ``T``
marks the reading, and the sensor, as malicious.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .traces import TripTrace


class SentinelError(ValueError):
    pass


@dataclass(frozen=True)
class KalmanState:
    x: float
    P: float = 1.0
    Q: float = 0.0
    R: float = 1.0

    def __post_init__(self):
        if self.P < 0 or self.Q < 0:
            raise SentinelError("P and Q must be >= 0")
        if self.R <= 0:
            raise SentinelError("R must be > 0")


@dataclass(frozen=True)
class SentinelConfig:
    """``Q``/``R`` of None are estimated per sensor from normal data.

    ``coast_on_flag`` skips the measurement update for flagged readings so an
    attack cannot drag the estimate; after ``max_coast`` consecutive flags the
    filter re-locks onto the observation. ``coast_on_flag=False`` always updates.
    """

    T: float = 2.0
    Q: Optional[float] = None
    R: Optional[float] = None
    P0: float = 1.0
    coast_on_flag: bool = True
    max_coast: int = 200

    def __post_init__(self):
        if self.T <= 0:
            raise SentinelError("threshold T must be > 0")


class FlagEvent(NamedTuple):
    index: int
    predicted: float
    observed: float
    abs_diff: float


@dataclass
class SensorVerdict:
    sensor: int
    flag_events: List[FlagEvent] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flag_events)


def kf_init(first_reading: float, cfg: SentinelConfig = SentinelConfig(), Q: float = None,
            R: float = None) -> KalmanState:
    Q = cfg.Q if Q is None else Q
    R = cfg.R if R is None else R
    return KalmanState(float(first_reading), cfg.P0, 0.0 if Q is None else Q, 1.0 if R is None else R)


def kf_predict(state: KalmanState) -> KalmanState:
    return replace(state, P=state.P + state.Q)


def kf_step(state: KalmanState, z: float, update: bool = True):
    """One predict/update cycle. Returns (new_state, prediction made before seeing z)."""
    if not math.isfinite(z):
        raise SentinelError(f"non-finite measurement {z!r}")
    pred = kf_predict(state)
    if not update:
        return pred, pred.x
    gain = pred.P / (pred.P + pred.R)
    x = pred.x + gain * (z - pred.x)
    return replace(pred, x=x, P=(1.0 - gain) * pred.P), pred.x


def estimate_noise(readings: np.ndarray):
    """(Q, R): R = var(successive differences) / 2, Q = R / 10."""
    d = np.diff(np.asarray(readings, dtype=np.float64))
    r = float(d.var() / 2.0) if d.size > 1 else 0.0
    r = max(r, 1e-12)
    return r / 10.0, r


def fit_normal(normal: TripTrace, cfg: SentinelConfig = SentinelConfig()):
    """Run one filter per sensor over clean readings.

    Returns (filters, histories) where ``histories[i]`` lists the prediction
    made before each reading of sensor i.
    """
    if normal is None or len(normal) == 0:
        raise SentinelError("normal trace is empty")
    m = normal.matrix()
    filters, histories = [], []
    for row in m:
        q, r = estimate_noise(row)
        state = kf_init(row[0], cfg, Q=cfg.Q if cfg.Q is not None else q, R=cfg.R if cfg.R is not None else r)
        hist = np.empty(len(row))
        for i, z in enumerate(row):
            state, hist[i] = kf_step(state, float(z))
        filters.append(state)
        histories.append(hist)
    return filters, histories


def scan_channel(state: KalmanState, readings, cfg: SentinelConfig, sensor: int = 0):
    """Online predict-then-compare over one sensor stream.

    The filter keeps its fitted P/Q/R but restarts its estimate at the first
    incoming reading. Returns (verdict, predictions).
    """
    readings = np.asarray(readings, dtype=np.float64)
    verdict = SensorVerdict(sensor)
    preds = np.empty(len(readings))
    if len(readings) == 0:
        return verdict, preds
    state = replace(state, x=float(readings[0]))
    coast = 0
    for i, z in enumerate(readings):
        pred_state = kf_predict(state)
        z = float(z)
        gap = abs(pred_state.x - z)
        preds[i] = pred_state.x
        flagged = gap > cfg.T
        if flagged:
            verdict.flag_events.append(FlagEvent(i, float(pred_state.x), z, gap))
        if flagged and cfg.coast_on_flag and coast < cfg.max_coast:
            state = pred_state
            coast += 1
            continue
        coast = 0
        state, _ = kf_step(state, float(z))
    return verdict, preds


def scan_for_malicious(filters: Sequence[KalmanState], incoming: TripTrace,
                       cfg: SentinelConfig = SentinelConfig(), return_predictions: bool = False):
    """Per-sensor verdicts; the malicious set is ``{v.sensor for v in verdicts if v.flagged}``."""
    if len(filters) != incoming.n_channels:
        raise SentinelError(f"{len(filters)} filters for {incoming.n_channels} channels")
    m = incoming.matrix()
    verdicts, preds = [], []
    for i, (state, row) in enumerate(zip(filters, m)):
        v, p = scan_channel(state, row, cfg, sensor=i)
        verdicts.append(v)
        preds.append(p)
    if return_predictions:
        return verdicts, preds
    return verdicts


def malicious_set(verdicts: Sequence[SensorVerdict]) -> List[int]:
    return sorted(v.sensor for v in verdicts if v.flagged)


def write_verdicts(verdicts: Sequence[SensorVerdict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sensor", "index", "predicted", "observed", "abs_diff"])
        for v in verdicts:
            for e in v.flag_events:
                w.writerow([v.sensor, e.index, repr(e.predicted), repr(e.observed), repr(e.abs_diff)])
        w.writerow([f"# malicious: {' '.join(str(s) for s in malicious_set(verdicts)) or 'none'}"])


def read_verdicts(path, n_sensors: int) -> List[SensorVerdict]:
    verdicts = [SensorVerdict(i) for i in range(n_sensors)]
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for row in rows:
            if not row or row[0].startswith("#"):
                continue
            s = int(row[0])
            verdicts[s].flag_events.append(FlagEvent(int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    return verdicts
