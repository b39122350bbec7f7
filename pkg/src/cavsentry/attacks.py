"""Sensor-reading attacks: instant, constant, gradual drift and bias.

Every attack corrupts a single victim channel. Corruption is scheduled with an
exact sample budget (``ceil(rate * length)``) and every touched sample is
recorded in an :class:`InjectionLog`, which doubles as labelling ground truth.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Sequence, Union

import numpy as np

from .traces import TripTrace


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class Instant:
    """Single-sample shift: ``base + gain * n`` with ``n ~ Normal(0, noise_std)``."""

    gain: float = 1000.0
    noise_std: float = 0.1  # sqrt(0.01)
    name = "instant"


@dataclass(frozen=True)
class Constant:
    """Offset drawn once per event from ``Uniform(lo, hi)`` and held for ``duration`` seconds."""

    offset_range: tuple = (0.0, 5.0)
    duration: float = 10.0
    name = "constant"

    def __post_init__(self):
        if self.duration <= 0:
            raise AttackError("duration must be > 0")
        lo, hi = self.offset_range
        if lo > hi:
            raise AttackError("offset_range must satisfy lo <= hi")


@dataclass(frozen=True)
class GradualDrift:
    """Linear ramp reaching ``max_drift`` on the last sample of each event."""

    max_drift: float = 2.5
    duration: float = 10.0
    name = "gradual"

    def __post_init__(self):
        if self.duration <= 0:
            raise AttackError("duration must be > 0")


@dataclass(frozen=True)
class Bias:
    offset: float = 2.5
    duration: float = 10.0
    name = "bias"

    def __post_init__(self):
        if self.duration <= 0:
            raise AttackError("duration must be > 0")


AttackKind = Union[Instant, Constant, GradualDrift, Bias]
KINDS = {"instant": Instant, "constant": Constant, "gradual": GradualDrift, "bias": Bias}


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    victim: int
    rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise AttackError(f"rate must lie in (0, 1); got {self.rate}")
        if self.victim < 0:
            raise AttackError(f"victim channel must be >= 0; got {self.victim}")


class LogEntry(NamedTuple):
    channel: int
    index: int
    original: float
    injected: float
    kind: str


@dataclass
class InjectionLog:
    entries: List[LogEntry] = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.index, e.channel))
        keys = {(e.channel, e.index) for e in self.entries}
        if len(keys) != len(self.entries):
            raise AttackError("duplicate (channel, index) pair in injection log")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def merged(self, other: "InjectionLog") -> "InjectionLog":
        return InjectionLog(self.entries + other.entries)

    def sample_mask(self, length: int) -> np.ndarray:
        mask = np.zeros(length, dtype=bool)
        for e in self.entries:
            mask[e.index] = True
        return mask

    def channel_mask(self, n_channels: int, length: int) -> np.ndarray:
        mask = np.zeros((n_channels, length), dtype=bool)
        for e in self.entries:
            mask[e.channel, e.index] = True
        return mask

    @property
    def victims(self) -> set:
        return {e.channel for e in self.entries}

    def replay(self, trace: TripTrace) -> TripTrace:
        """Write the logged original values back, undoing the injection."""
        m = trace.matrix()
        for e in self.entries:
            m[e.channel, e.index] = e.original
        return trace.with_matrix(m)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "index", "original", "injected", "kind"])
            for e in self.entries:
                w.writerow([e.channel, e.index, repr(e.original), repr(e.injected), e.kind])

    @classmethod
    def from_csv(cls, path) -> "InjectionLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            LogEntry(int(r["channel"]), int(r["index"]), float(r["original"]), float(r["injected"]), r["kind"])
            for r in rows
        ])


def target_samples(rate: float, length: int) -> int:
    return int(math.ceil(rate * length - 1e-9))


def duration_samples(kind: AttackKind, sample_period: float) -> int:
    return max(1, int(round(kind.duration / sample_period)))


def _place_events(rng, length: int, size: int, count: int, occupied: np.ndarray,
                  max_retries: int) -> List[int]:
    """Draw ``count`` non-overlapping ``size``-sample events avoiding ``occupied``."""
    if size > length:
        raise AttackError(f"trace of {length} samples is too short for a {size}-sample event")
    if size == 1:
        free = np.flatnonzero(~occupied)
        if len(free) < count:
            raise AttackError(f"cannot place {count} single-sample events; only {len(free)} free samples")
        chosen = np.sort(rng.choice(free, size=count, replace=False))
        occupied[chosen] = True
        return chosen.tolist()
    starts = []
    retries = 0
    while len(starts) < count:
        s = int(rng.integers(0, length - size + 1))
        if occupied[s:s + size].any():
            retries += 1
            if retries > max_retries:
                raise AttackError(
                    f"could not place event {len(starts) + 1}/{count} without overlap after {max_retries} retries")
            continue
        occupied[s:s + size] = True
        starts.append(s)
    return sorted(starts)


def _check(trace: TripTrace, spec: AttackSpec, expected: type) -> None:
    if not isinstance(spec.kind, expected):
        raise AttackError(f"expected a {expected.__name__} spec, got {type(spec.kind).__name__}")
    if spec.victim >= trace.n_channels:
        raise AttackError(f"victim channel {spec.victim} out of range (trace has {trace.n_channels})")


def _event_size(spec: AttackSpec, sample_period: float) -> int:
    return 1 if isinstance(spec.kind, Instant) else duration_samples(spec.kind, sample_period)


def _schedule(trace, spec, rng, occupied, max_retries) -> List[int]:
    """Event start indices for one spec; ``occupied`` is updated in place."""
    n = len(trace)
    budget = target_samples(spec.rate, n)
    d = _event_size(spec, trace.sample_period)
    if d > n:
        raise AttackError(f"trace of {n} samples is too short for a {d}-sample event")
    count = budget if d == 1 else max(1, int(round(budget / d)))
    return _place_events(rng, n, d, count, occupied, max_retries)


def _inject(m, spec, starts, rng, sample_period) -> List[LogEntry]:
    kind = spec.kind
    row = m[spec.victim]
    entries = []
    if isinstance(kind, Instant):
        shifts = kind.gain * rng.normal(0.0, kind.noise_std, len(starts))
        for i, shift in zip(starts, shifts):
            orig = row[i]
            row[i] = orig + shift
            entries.append(LogEntry(spec.victim, i, float(orig), float(row[i]), kind.name))
        return entries
    d = duration_samples(kind, sample_period)
    for s in starts:
        if isinstance(kind, Constant):
            offsets = np.full(d, rng.uniform(*kind.offset_range))
        elif isinstance(kind, GradualDrift):
            offsets = kind.max_drift * np.arange(1, d + 1) / d
        else:
            offsets = np.full(d, kind.offset)
        for k in range(d):
            i = s + k
            orig = row[i]
            row[i] = orig + offsets[k]
            entries.append(LogEntry(spec.victim, i, float(orig), float(row[i]), kind.name))
    return entries


def _run(trace, specs, max_retries):
    occupied = np.zeros(len(trace), dtype=bool)
    rngs = [np.random.default_rng(s.seed) for s in specs]
    # longest events are placed first so short ones cannot fragment the free space
    order = sorted(range(len(specs)), key=lambda i: -_event_size(specs[i], trace.sample_period))
    starts = {}
    for i in order:
        starts[i] = _schedule(trace, specs[i], rngs[i], occupied, max_retries)
    m = trace.matrix()
    entries = []
    for i, spec in enumerate(specs):
        entries.extend(_inject(m, spec, starts[i], rngs[i], trace.sample_period))
    return trace.with_matrix(m), InjectionLog(entries)


def _single(trace, spec, expected, max_retries=1000):
    _check(trace, spec, expected)
    return _run(trace, [spec], max_retries)


def inject_instant(trace: TripTrace, spec: AttackSpec):
    return _single(trace, spec, Instant)


def inject_constant(trace: TripTrace, spec: AttackSpec):
    return _single(trace, spec, Constant)


def inject_gradual(trace: TripTrace, spec: AttackSpec):
    return _single(trace, spec, GradualDrift)


def inject_bias(trace: TripTrace, spec: AttackSpec):
    return _single(trace, spec, Bias)


def inject_campaign(trace: TripTrace, specs: Sequence[AttackSpec], max_retries: int = 1000):
    """Apply specs in order with no sample touched twice across the campaign."""
    specs = list(specs)
    if not specs:
        raise AttackError("campaign needs at least one attack spec")
    for spec in specs:
        _check(trace, spec, type(spec.kind))
    return _run(trace, specs, max_retries)


# --- campaign files ---------------------------------------------------------

def make_kind(name: str, **params) -> AttackKind:
    if name not in KINDS:
        raise AttackError(f"unknown attack kind {name!r}; choose from {sorted(KINDS)}")
    if name == "constant" and ("offset_lo" in params or "offset_hi" in params):
        lo = params.pop("offset_lo", 0.0)
        hi = params.pop("offset_hi", 5.0)
        params["offset_range"] = (lo, hi)
    try:
        return KINDS[name](**params)
    except TypeError as exc:
        raise AttackError(f"bad parameter for {name} attack: {exc}") from None


_FLOAT_KEYS = {"gain", "noise_std", "offset_lo", "offset_hi", "duration", "max_drift", "offset"}


def parse_campaign(text: str) -> List[AttackSpec]:
    """Parse an INI campaign: one ``[attack ...]`` section per spec."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise AttackError(f"malformed campaign file: {exc}") from None
    specs = []
    for section in cp.sections():
        if not section.startswith("attack"):
            continue
        sec = dict(cp[section])
        try:
            kind_name = sec.pop("kind")
            victim = int(sec.pop("victim"))
            rate = float(sec.pop("rate", 0.05))
            seed = int(sec.pop("seed", 0))
        except KeyError as exc:
            raise AttackError(f"[{section}] missing key {exc}") from None
        except ValueError as exc:
            raise AttackError(f"[{section}] {exc}") from None
        params = {}
        for k, v in sec.items():
            if k not in _FLOAT_KEYS:
                raise AttackError(f"[{section}] unknown key {k!r}")
            params[k] = float(v)
        specs.append(AttackSpec(make_kind(kind_name, **params), victim, rate, seed))
    if not specs:
        raise AttackError("campaign file defines no [attack ...] sections")
    return specs


def load_campaign(path) -> List[AttackSpec]:
    return parse_campaign(Path(path).read_text())
