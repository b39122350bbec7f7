"""Trip traces: loading, synthetic generation, windowing, normalization, splits.

A trace is a set of equally long sensor channels sampled at a fixed period.
Timestamps are implicit (``index * sample_period``).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_CHANNELS = ("speed_invehicle", "speed_gps", "accel")
DEFAULT_UNITS = ("m/s", "m/s", "m/s^2")

NORMAL = 0
ANOMALY = 1


class TraceError(ValueError):
    """Raised for malformed traces, schemas and window requests."""


@dataclass(frozen=True)
class SensorChannel:
    name: str
    unit: str
    readings: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.readings, dtype=np.float64)
        if arr.ndim != 1:
            raise TraceError(f"channel {self.name!r}: readings must be 1-D")
        if not np.all(np.isfinite(arr)):
            raise TraceError(f"channel {self.name!r}: non-finite reading")
        arr.setflags(write=False)
        object.__setattr__(self, "readings", arr)


@dataclass(frozen=True)
class TripTrace:
    trip_id: str
    sensors: tuple
    sample_period: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if self.sample_period <= 0:
            raise TraceError("sample_period must be > 0")
        if not self.sensors:
            raise TraceError("a trace needs at least one channel")
        lengths = {len(s.readings) for s in self.sensors}
        if len(lengths) != 1:
            raise TraceError(f"channels have unequal lengths: {sorted(lengths)}")
        if lengths.pop() < 2:
            raise TraceError("trace length must be >= 2")

    def __len__(self) -> int:
        return len(self.sensors[0].readings)

    @property
    def n_channels(self) -> int:
        return len(self.sensors)

    @property
    def names(self) -> list:
        return [s.name for s in self.sensors]

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self)) * self.sample_period

    def matrix(self) -> np.ndarray:
        """Channel-major copy of the readings, shape (channels, length)."""
        return np.stack([s.readings for s in self.sensors])

    def with_matrix(self, values: np.ndarray, trip_id: Optional[str] = None) -> "TripTrace":
        sensors = tuple(
            SensorChannel(s.name, s.unit, values[i]) for i, s in enumerate(self.sensors)
        )
        return TripTrace(trip_id or self.trip_id, sensors, self.sample_period)


@dataclass(frozen=True)
class TraceSchema:
    """Column mapping for delimited trace files.

    ``columns`` lists the header names to read, in channel order. ``time_column``
    (if present in the file) is checked for monotonicity and otherwise ignored.
    """

    columns: tuple = DEFAULT_CHANNELS
    units: tuple = DEFAULT_UNITS
    time_column: Optional[str] = "t"
    sample_period: float = 0.1


def load_trace(path, schema: TraceSchema = TraceSchema(), trip_id: Optional[str] = None) -> TripTrace:
    path = Path(path)
    if not path.exists():
        raise TraceError(f"trace file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise TraceError(f"{path}: missing column(s) {missing}; header is {header}")
        idx = [header.index(c) for c in schema.columns]
        t_idx = header.index(schema.time_column) if schema.time_column in header else None
        rows = []
        times = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(row[i]) for i in idx])
                if t_idx is not None:
                    times.append(float(row[t_idx]))
            except (ValueError, IndexError):
                raise TraceError(f"{path}: non-numeric or missing cell on line {lineno} (data row {len(rows)})") from None
    if not rows:
        raise TraceError(f"{path}: no data rows")
    if len(rows) < 2:
        raise TraceError(f"{path}: trace length {len(rows)} < 2")
    if times and np.any(np.diff(times) <= 0):
        raise TraceError(f"{path}: time column is not strictly increasing")
    values = np.asarray(rows, dtype=np.float64).T
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0][1])
        raise TraceError(f"{path}: non-finite value in data row {bad}")
    units = tuple(schema.units) + ("",) * (len(schema.columns) - len(schema.units))
    sensors = tuple(SensorChannel(c, units[i], values[i]) for i, c in enumerate(schema.columns))
    return TripTrace(trip_id or path.stem, sensors, schema.sample_period)


def save_trace(trace: TripTrace, path) -> None:
    path = Path(path)
    m = trace.matrix()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *trace.names])
        for i in range(len(trace)):
            w.writerow([repr(round(i * trace.sample_period, 10)), *(repr(float(v)) for v in m[:, i])])


@dataclass(frozen=True)
class SynthProfile:
    """Drive-cycle parameters for :func:`synth_trace`.

    Speed follows random waypoints joined by linear ramps and cruise holds,
    smoothed by a moving average so acceleration changes gradually.
    Setting ``constant_speed`` bypasses the drive cycle.
    """

    speed_range: tuple = (3.0, 30.0)
    max_accel: float = 2.0
    segment_s: tuple = (5.0, 40.0)
    cruise_prob: float = 0.35
    smooth_s: float = 3.0
    speed_noise: float = 0.005
    gps_noise: float = 0.01
    sample_period: float = 0.1
    constant_speed: Optional[float] = None

    def __post_init__(self):
        if self.speed_noise < 0 or self.gps_noise < 0:
            raise TraceError("noise levels must be >= 0")
        if max(self.speed_noise, self.gps_noise) > 0.1:
            raise TraceError("noise levels above 0.1 m/s are outside the drive-cycle model")


def _drive_cycle(rng: np.random.Generator, n: int, p: SynthProfile) -> np.ndarray:
    dt = p.sample_period
    lo, hi = p.speed_range
    v = [rng.uniform(lo, hi)]
    while len(v) < n:
        seg = max(2, int(rng.uniform(*p.segment_s) / dt))
        if rng.random() < p.cruise_prob:
            v.extend([v[-1]] * seg)
            continue
        target = rng.uniform(lo, hi)
        # ramp at most max_accel; a longer segment absorbs the rest as cruise
        steps = max(1, int(np.ceil(abs(target - v[-1]) / (p.max_accel * dt))))
        steps = max(steps, seg // 2)
        v.extend(np.linspace(v[-1], target, steps + 1)[1:])
    v = np.asarray(v[:n])
    width = max(1, int(round(p.smooth_s / dt)))
    if width > 1:
        kernel = np.ones(width) / width
        for _ in range(2):
            padded = np.pad(v, (width // 2, width - 1 - width // 2), mode="edge")
            v = np.convolve(padded, kernel, mode="valid")
    return v


def synth_trace(seed: int, length: int, profile: SynthProfile = SynthProfile(),
                trip_id: Optional[str] = None) -> TripTrace:
    """Deterministic 3-channel stand-in for an SPMD trip."""
    if length < 2:
        raise TraceError("length must be >= 2")
    rng = np.random.default_rng(seed)
    dt = profile.sample_period
    if profile.constant_speed is not None:
        true_v = np.full(length, float(profile.constant_speed))
    else:
        true_v = _drive_cycle(rng, length, profile)
    speed = true_v + rng.normal(0.0, profile.speed_noise, length) if profile.speed_noise else true_v.copy()
    gps = true_v + rng.normal(0.0, profile.gps_noise, length) if profile.gps_noise else true_v.copy()
    accel = np.empty(length)
    accel[1:] = np.diff(speed) / dt
    accel[0] = accel[1]
    sensors = tuple(
        SensorChannel(name, unit, arr)
        for name, unit, arr in zip(DEFAULT_CHANNELS, DEFAULT_UNITS, (speed, gps, accel))
    )
    return TripTrace(trip_id or f"synth-{seed}", sensors, dt)


@dataclass(frozen=True)
class LabeledWindowSet:
    """Fixed-length windows, shape (N, channels, window_len), with 0/1 labels."""

    window_len: int
    stride: int
    values: np.ndarray
    labels: np.ndarray
    starts: np.ndarray
    trip_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != self.window_len:
            raise TraceError(f"window values must be (N, C, {self.window_len}); got {values.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        starts = np.asarray(self.starts, dtype=np.int64)
        if labels.shape != (values.shape[0],) or starts.shape != labels.shape:
            raise TraceError("labels/starts must have one entry per window")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "starts", starts)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def subset(self, idx) -> "LabeledWindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, values=self.values[idx], labels=self.labels[idx], starts=self.starts[idx])

    def select_channels(self, channels: Sequence[int]) -> "LabeledWindowSet":
        return replace(self, values=self.values[:, list(channels), :])


def window_count(length: int, window_len: int, stride: int) -> int:
    return (length - window_len) // stride + 1


def label_windows(mask: np.ndarray, window_len: int, stride: int, rule: str = "any") -> np.ndarray:
    """Window labels from a per-sample anomaly mask (channels collapsed).

    ``rule="any"`` marks a window anomalous if it holds one corrupted sample;
    ``rule="majority"`` needs more than half of its samples corrupted.
    """
    mask = np.asarray(mask, dtype=bool)
    n = window_count(len(mask), window_len, stride)
    csum = np.concatenate([[0], np.cumsum(mask)])
    starts = np.arange(n) * stride
    hits = csum[starts + window_len] - csum[starts]
    if rule == "any":
        return (hits > 0).astype(np.int64)
    if rule == "majority":
        return (2 * hits > window_len).astype(np.int64)
    raise TraceError(f"unknown label rule {rule!r}")


def make_windows(trace: TripTrace, log=None, window_len: int = 20, stride: int = 10,
                 rule: str = "any") -> LabeledWindowSet:
    if window_len < 2:
        raise TraceError("window_len must be >= 2")
    if stride < 1:
        raise TraceError("stride must be >= 1")
    if window_len > len(trace):
        raise TraceError(f"window_len {window_len} exceeds trace length {len(trace)}")
    mask = np.zeros(len(trace), dtype=bool)
    if log is not None:
        mask = log.sample_mask(len(trace))
    n = window_count(len(trace), window_len, stride)
    starts = np.arange(n) * stride
    m = trace.matrix()
    view = np.lib.stride_tricks.sliding_window_view(m, window_len, axis=1)  # (C, len-W+1, W)
    values = np.ascontiguousarray(view[:, starts, :].transpose(1, 0, 2))
    return LabeledWindowSet(window_len, stride, values, label_windows(mask, window_len, stride, rule),
                            starts, trace.trip_id)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


STD_FLOOR = 1e-8


def normalize(windows: LabeledWindowSet, stats: Optional[NormStats] = None):
    """Per-channel z-score. Pass the training stats when normalizing test data."""
    if stats is None:
        mean = windows.values.mean(axis=(0, 2))
        std = np.maximum(windows.values.std(axis=(0, 2)), STD_FLOOR)
        stats = NormStats(mean, std)
    elif len(stats.mean) != windows.n_channels:
        raise TraceError(f"stats cover {len(stats.mean)} channels, windows have {windows.n_channels}")
    out = (windows.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(windows, values=out), stats


def denormalize(windows: LabeledWindowSet, stats: NormStats) -> LabeledWindowSet:
    out = windows.values * stats.std[None, :, None] + stats.mean[None, :, None]
    return replace(windows, values=out)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    strategy: str = "contiguous"  # or "shuffled"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise TraceError("train_fraction must lie in (0, 1)")
        if self.strategy not in ("contiguous", "shuffled"):
            raise TraceError(f"unknown split strategy {self.strategy!r}")


def split(windows: LabeledWindowSet, spec: SplitSpec = SplitSpec()):
    n = len(windows)
    if n < 2:
        raise TraceError("need at least 2 windows to split")
    n_train = min(max(int(round(spec.train_fraction * n)), 1), n - 1)
    if spec.strategy == "contiguous":
        order = np.arange(n)
    else:
        order = np.random.default_rng(spec.seed).permutation(n)
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return windows.subset(train_idx), windows.subset(test_idx)


# --- window-set container -------------------------------------------------
# Layout documented in FORMATS.md.

WINDOW_MAGIC = b"CSWS"
WINDOW_VERSION = 1


def save_windows(windows: LabeledWindowSet, path) -> None:
    n, c, w = windows.values.shape
    trip = windows.trip_id.encode()
    with open(path, "wb") as fh:
        fh.write(WINDOW_MAGIC)
        fh.write(struct.pack("<B", WINDOW_VERSION))
        fh.write(struct.pack("<IIII", n, c, w, windows.stride))
        fh.write(struct.pack("<H", len(trip)))
        fh.write(trip)
        fh.write(np.ascontiguousarray(windows.values, dtype="<f8").tobytes())
        fh.write(windows.labels.astype("<u1").tobytes())
        fh.write(windows.starts.astype("<i8").tobytes())


def load_windows(path) -> LabeledWindowSet:
    data = Path(path).read_bytes()
    if data[:4] != WINDOW_MAGIC:
        raise TraceError(f"{path}: not a window-set file")
    if len(data) < 23:
        raise TraceError(f"{path}: truncated header")
    version = data[4]
    if version != WINDOW_VERSION:
        raise TraceError(f"{path}: unsupported window-set version {version} (expected {WINDOW_VERSION})")
    n, c, w, stride = struct.unpack_from("<IIII", data, 5)
    (tlen,) = struct.unpack_from("<H", data, 21)
    off = 23
    trip = data[off:off + tlen].decode()
    off += tlen
    need = off + n * c * w * 8 + n + n * 8
    if len(data) != need:
        raise TraceError(f"{path}: expected {need} bytes, found {len(data)}")
    values = np.frombuffer(data, "<f8", n * c * w, off).reshape(n, c, w).astype(np.float64)
    off += n * c * w * 8
    labels = np.frombuffer(data, "<u1", n, off).astype(np.int64)
    off += n
    starts = np.frombuffer(data, "<i8", n, off).astype(np.int64)
    return LabeledWindowSet(w, stride, values, labels, starts, trip)
