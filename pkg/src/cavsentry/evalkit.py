"""Detection metrics, attribution scoring and the amplification ablation harness.

The positive class is "anomaly" (label 1) throughout.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_grid(self) -> np.ndarray:
        """Rows are true class (normal, anomaly); columns predicted class."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


def confusion(predictions, labels) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple = ()  # names of metrics whose denominator was zero


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> Metrics:
    undefined = []
    acc = _ratio(cm.tp + cm.tn, cm.total, "accuracy", undefined)
    prec = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    f1 = _ratio(2 * prec * rec, prec + rec, "f1", undefined)
    return Metrics(acc, prec, rec, f1, tuple(undefined))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    """Per-sensor metrics plus run metadata; JSON round-trips losslessly."""

    sensors: Dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, sensor: str, cm: ConfusionMatrix, **extra) -> Metrics:
        m = metrics(cm)
        self.sensors[sensor] = {**asdict(m), "undefined": list(m.undefined), "confusion": asdict(cm), **extra}
        return m

    def confusion_of(self, sensor: str) -> ConfusionMatrix:
        return ConfusionMatrix(**self.sensors[sensor]["confusion"])

    def to_json(self) -> str:
        return json.dumps({"sensors": self.sensors, "metadata": self.metadata}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["sensors"], d["metadata"])

    def table(self) -> str:
        lines = [f"{'sensor':<18}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}{'tp':>7}{'fp':>7}{'fn':>7}{'tn':>7}"]
        for name, s in self.sensors.items():
            c = s["confusion"]
            lines.append(f"{name:<18}{s['accuracy']:>8.4f}{s['precision']:>8.4f}{s['recall']:>8.4f}"
                         f"{s['f1']:>8.4f}{c['tp']:>7}{c['fp']:>7}{c['fn']:>7}{c['tn']:>7}")
        return "\n".join(lines)

    def write_series(self, path) -> None:
        """Plot-ready CSV: one row per sensor."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sensor", "accuracy", "precision", "recall", "f1"])
            for name, s in self.sensors.items():
                w.writerow([name, s["accuracy"], s["precision"], s["recall"], s["f1"]])


def attribution_score(verdicts, victims: Iterable[int], n_sensors: Optional[int] = None) -> dict:
    """Score a flagged-sensor set against the true victims.

    ``verdicts`` may be SensorVerdict objects or a plain iterable of flagged
    sensor indices.
    """
    verdicts = list(verdicts)
    if verdicts and hasattr(verdicts[0], "flag_events"):
        flagged = {v.sensor for v in verdicts if v.flagged}
        n_sensors = n_sensors or len(verdicts)
    else:
        flagged = set(int(v) for v in verdicts)
    victims = set(int(v) for v in victims)
    n_sensors = n_sensors or (max(flagged | victims, default=-1) + 1)
    per_sensor = {}
    for s in range(n_sensors):
        if s in victims:
            per_sensor[s] = "hit" if s in flagged else "miss"
        else:
            per_sensor[s] = "false_alarm" if s in flagged else "clear"
    hits = sum(1 for v in per_sensor.values() if v == "hit")
    false_alarms = sum(1 for v in per_sensor.values() if v == "false_alarm")
    return {
        "per_sensor": per_sensor,
        "hits": hits,
        "misses": len(victims) - hits,
        "false_alarms": false_alarms,
        "exact": flagged == victims,
    }


@dataclass
class AblationResult:
    with_amp: MetricsReport
    without_amp: MetricsReport

    def f1_pairs(self) -> Dict[str, tuple]:
        return {s: (self.with_amp.sensors[s]["f1"], self.without_amp.sensors[s]["f1"])
                for s in self.with_amp.sensors}

    def to_json(self) -> str:
        return json.dumps({"with_amp": json.loads(self.with_amp.to_json()),
                           "without_amp": json.loads(self.without_amp.to_json())}, sort_keys=True, indent=2)


def ablation(run: Callable[[bool], MetricsReport]) -> AblationResult:
    """Run the same train+eval pipeline with and without amplification.

    ``run(amplify)`` must be deterministic given its own seeds; only the flag
    differs between the two calls.
    """
    with_amp = run(True)
    without_amp = run(False)
    return AblationResult(with_amp, without_amp)
