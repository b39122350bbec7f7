"""File-based stages of the detect-and-attribute pipeline.

Each stage reads its inputs from disk and writes its outputs into a directory,
so stages can be run one by one from the CLI or chained by :func:`run_pipeline`.
Running the chain equals running the stages manually with the same config.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import oscnn
from .amplify import AmplifierConfig, amplify_windows, calibrate_windows
from .attacks import AttackSpec, InjectionLog, inject_campaign, make_kind
from .evalkit import AblationResult, MetricsReport, attribution_score, config_hash, confusion, metrics
from .sentinel import SentinelConfig, fit_normal, malicious_set, scan_for_malicious, write_verdicts
from .traces import (
    DEFAULT_CHANNELS,
    NormStats,
    SplitSpec,
    TraceSchema,
    TripTrace,
    load_trace,
    load_windows,
    make_windows,
    normalize,
    save_trace,
    save_windows,
    split,
    synth_trace,
)

log = logging.getLogger(__name__)

ATTACKS = ("instant", "constant", "gradual", "bias")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    length: int = 29800
    attack: str = "instant"
    sensors: tuple = (0, 1, 2)
    rate: float = 0.05
    attack_params: dict = field(default_factory=dict)
    window: int = 20
    stride: int = 10
    label_rule: str = "any"
    train_fraction: float = 0.8
    split_strategy: str = "contiguous"
    amplify: bool = True
    alpha: Optional[float] = None  # None: calibrated per channel on normal training windows
    calibrate_k: float = 6.0
    beta: float = 1.0
    amp_mode: str = "multiply"
    epochs: int = 50
    batch: int = 20
    lr: float = 1e-4
    channels_per_kernel: int = 4
    threshold_T: float = 2.0
    train_seed: Optional[int] = None  # model init and shuffling; defaults to ``seed``
    class_weights: str = "none"  # or "inverse": inverse class frequency in the loss

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(int(s) for s in self.sensors))
        object.__setattr__(self, "attack_params", dict(self.attack_params))
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if not 0.0 < self.rate < 1.0:
            raise ConfigError(f"rate must lie in (0, 1), got {self.rate}")
        if not self.sensors:
            raise ConfigError("at least one victim sensor is required")
        if len(set(self.sensors)) != len(self.sensors) or min(self.sensors) < 0:
            raise ConfigError(f"sensors must be distinct non-negative indices, got {list(self.sensors)}")
        if self.window < 2 or self.stride < 1:
            raise ConfigError("window must be >= 2 and stride >= 1")
        if self.length < self.window:
            raise ConfigError(f"length {self.length} is shorter than one window ({self.window})")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch >= 1 and lr > 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.threshold_T <= 0:
            raise ConfigError("threshold_T must be > 0")
        if self.label_rule not in ("any", "majority"):
            raise ConfigError(f"label_rule must be 'any' or 'majority', got {self.label_rule!r}")
        if self.class_weights not in ("none", "inverse"):
            raise ConfigError(f"class_weights must be 'none' or 'inverse', got {self.class_weights!r}")
        if self.amp_mode not in ("multiply", "additive"):
            raise ConfigError(f"amp_mode must be 'multiply' or 'additive', got {self.amp_mode!r}")
        try:
            make_kind(self.attack, **self.attack_params)
            SplitSpec(self.train_fraction, self.seed, self.split_strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensors"] = list(self.sensors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    # seeds derived from the master seed; all of them land in the manifest
    def attack_seed(self, victim: int) -> int:
        return self.seed * 1000 + victim

    @property
    def model_seed(self) -> int:
        return self.seed if self.train_seed is None else self.train_seed

    def seeds(self) -> dict:
        return {
            "master": self.seed,
            "synth": self.seed,
            "attack": {str(v): self.attack_seed(v) for v in self.sensors},
            "model_init": self.model_seed,
            "shuffle": self.model_seed,
            "split": self.seed,
        }


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: Dict[str, str],
                   outputs: Sequence[Path]) -> Path:
    out = Path(out)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(Path(p).relative_to(out)): sha256_of(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _trace_schema(names: Sequence[str]) -> TraceSchema:
    return TraceSchema(tuple(names))


def read_trace(path, names: Sequence[str] = DEFAULT_CHANNELS) -> TripTrace:
    return load_trace(path, _trace_schema(names))


# --- stages ---------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trace.csv"
    save_trace(synth_trace(cfg.seed, cfg.length), path)
    return path


def stage_inject(trace_path, cfg: PipelineConfig, victim: int, out, campaign: Optional[List[AttackSpec]] = None):
    """Corrupt one victim channel (or run a whole campaign). Returns (trace path, log path)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace = read_trace(trace_path)
    if campaign is None:
        kind = make_kind(cfg.attack, **cfg.attack_params)
        campaign = [AttackSpec(kind, victim, cfg.rate, cfg.attack_seed(victim))]
    dirty, injection_log = inject_campaign(trace, campaign)
    trace_out, log_out = out / "injected.csv", out / "injection_log.csv"
    save_trace(dirty, trace_out)
    injection_log.to_csv(log_out)
    return trace_out, log_out


def stage_amplify(trace_path, log_path, cfg: PipelineConfig, out):
    """Window, split and amplify. Writes train/test window sets plus amplify.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace = read_trace(trace_path)
    injection_log = InjectionLog.from_csv(log_path) if log_path else None
    ws = make_windows(trace, injection_log, cfg.window, cfg.stride, cfg.label_rule)
    train_set, test_set = split(ws, SplitSpec(cfg.train_fraction, cfg.seed, cfg.split_strategy))
    info = {"enabled": cfg.amplify, "beta": cfg.beta, "mode": cfg.amp_mode, "alpha": None}
    if cfg.amplify:
        alpha = (calibrate_windows(train_set, cfg.calibrate_k).tolist() if cfg.alpha is None
                 else [float(cfg.alpha)] * ws.n_channels)
        amp = AmplifierConfig(np.array(alpha), cfg.beta, cfg.amp_mode)
        # the same thresholds apply to training and test windows
        train_set, test_set = amplify_windows(train_set, amp), amplify_windows(test_set, amp)
        info["alpha"] = alpha
    save_windows(train_set, out / "train.csws")
    save_windows(test_set, out / "test.csws")
    (out / "amplify.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out / "train.csws", out / "test.csws"


def normal_window_stats(windows) -> NormStats:
    """z-score statistics from the normal-labelled windows (all windows if none are normal)."""
    normal = np.flatnonzero(windows.labels == 0)
    return normalize(windows.subset(normal) if len(normal) else windows)[1]


def inverse_frequency(labels, n_classes: int = 2) -> tuple:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(float)
    counts[counts == 0] = 1.0
    return tuple(float(v) for v in len(labels) / (n_classes * counts))


def stage_train(train_path, cfg: PipelineConfig, out):
    """Normalize and train. Writes model.csmd, norm.json and history.jsonl."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_windows(train_path)
    stats = normal_window_stats(train_set)
    train_set, _ = normalize(train_set, stats)
    model = oscnn.build_model(oscnn.ModelConfig(cfg.window, train_set.n_channels, cfg.channels_per_kernel),
                              cfg.model_seed)
    weights = inverse_frequency(train_set.labels) if cfg.class_weights == "inverse" else None
    model, history = oscnn.train(model, train_set,
                                 oscnn.TrainConfig(cfg.epochs, cfg.batch, cfg.lr, cfg.model_seed,
                                                   class_weights=weights))
    oscnn.save(model, out / "model.csmd")
    (out / "norm.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    with open(out / "history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out / "model.csmd", out / "norm.json", history


def stage_eval(model_path, norm_path, test_path, out):
    """Classify test windows. Writes predictions.csv; returns the confusion matrix."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = oscnn.load(model_path)
    stats = NormStats.from_dict(json.loads(Path(norm_path).read_text()))
    test_set, _ = normalize(load_windows(test_path), stats)
    labels, scores = oscnn.predict(model, test_set)
    with open(out / "predictions.csv", "w") as fh:
        fh.write("start,label,predicted,p_anomaly\n")
        for s, y, p, sc in zip(test_set.starts, test_set.labels, labels, scores[:, 1]):
            fh.write(f"{s},{y},{p},{float(sc)!r}\n")
    return confusion(labels, test_set.labels)


def stage_detect(clean_path, incoming_path, cfg: PipelineConfig, out):
    """Fit per-sensor filters on the clean trace and scan the incoming one."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clean, incoming = read_trace(clean_path), read_trace(incoming_path)
    sc = SentinelConfig(T=cfg.threshold_T)
    filters, _ = fit_normal(clean, sc)
    verdicts, preds = scan_for_malicious(filters, incoming, sc, return_predictions=True)
    write_verdicts(verdicts, out / "verdicts.csv")
    return verdicts, preds


# --- orchestration ----------------------------------------------------------

@dataclass
class VictimRun:
    victim: int
    sensor: str
    confusion: object
    history: list
    malicious: list
    attribution: dict
    trace_path: Path
    verdicts: list = field(repr=False, default_factory=list)
    predictions: list = field(repr=False, default_factory=list)


def run_victim(cfg: PipelineConfig, clean_path, victim: int, out) -> VictimRun:
    out = Path(out)
    names = read_trace(clean_path).names
    if victim >= len(names):
        raise ConfigError(f"sensor {victim} out of range (trace has {len(names)} channels)")
    trace_path, log_path = stage_inject(clean_path, cfg, victim, out)
    train_path, test_path = stage_amplify(trace_path, log_path, cfg, out)
    model_path, norm_path, history = stage_train(train_path, cfg, out)
    cm = stage_eval(model_path, norm_path, test_path, out)
    verdicts, preds = stage_detect(clean_path, trace_path, cfg, out)
    flagged = malicious_set(verdicts)
    score = attribution_score(verdicts, [victim], len(names))
    score["per_sensor"] = {str(k): v for k, v in score["per_sensor"].items()}
    log.info("victim %s: acc %.4f f1 %.4f flagged %s", names[victim], metrics(cm).accuracy, metrics(cm).f1, flagged)
    return VictimRun(victim, names[victim], cm, history, flagged, score, trace_path, verdicts, preds)


def build_report(cfg: PipelineConfig, runs: Sequence[VictimRun]) -> MetricsReport:
    # the amplification flag is kept out of the hash so ablation pairs share it
    hashed = {k: v for k, v in cfg.to_dict().items() if k != "amplify"}
    report = MetricsReport(metadata={
        "seed": cfg.seed,
        "train_seed": cfg.model_seed,
        "config_hash": config_hash(hashed),
        "attack": cfg.attack,
        "amplify": cfg.amplify,
        "threshold_T": cfg.threshold_T,
    })
    for r in runs:
        report.add(r.sensor, r.confusion, victim=r.victim, malicious=r.malicious,
                   attribution_exact=r.attribution["exact"])
    return report


def write_report(report: MetricsReport, out) -> List[Path]:
    out = Path(out)
    paths = [out / "metrics.json", out / "metrics.txt", out / "metrics_series.csv"]
    paths[0].write_text(report.to_json() + "\n")
    paths[1].write_text(report.table() + "\n")
    report.write_series(paths[2])
    return paths


def run_pipeline(cfg: PipelineConfig, out, input_path=None, figures: bool = True) -> dict:
    """Synthesize (or load) a clean trace, then per victim sensor: inject, amplify,
    train, evaluate and scan. Writes one report and one manifest under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if input_path is None:
        clean_path = stage_synth(cfg, out)
    else:
        clean = read_trace(input_path)
        if len(clean) < cfg.window:
            raise ConfigError(f"input trace has {len(clean)} samples, fewer than one window")
        clean_path = out / "trace.csv"
        save_trace(clean, clean_path)
    runs = [run_victim(cfg, clean_path, v, out / f"victim-{v}") for v in cfg.sensors]
    report = build_report(cfg, runs)
    outputs = write_report(report, out)
    if figures:
        from . import plotting
        outputs += plotting.pipeline_figures(report, runs, out)
    outputs += [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json" and p not in outputs]
    write_manifest(out, "pipeline", cfg.to_dict(), cfg.seeds(),
                   {"input": str(input_path) if input_path else "synthetic"}, outputs)
    return {
        "report": report,
        "runs": runs,
        "malicious": sorted({s for r in runs for s in r.malicious}),
    }


def run_ablation(cfg: PipelineConfig, out, input_path=None, figures: bool = True) -> AblationResult:
    out = Path(out)

    def run(flag: bool) -> MetricsReport:
        sub = replace(cfg, amplify=flag)
        return run_pipeline(sub, out / ("with_amp" if flag else "without_amp"), input_path, figures=False)["report"]

    from .evalkit import ablation
    result = ablation(run)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "ablation.json"]
    outputs[0].write_text(result.to_json() + "\n")
    if figures:
        from . import plotting
        outputs.append(plotting.ablation_bars(result, out / "ablation_f1.png"))
    write_manifest(out, "ablate", cfg.to_dict(), cfg.seeds(),
                   {"input": str(input_path) if input_path else "synthetic"}, outputs)
    return result
