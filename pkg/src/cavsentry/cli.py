"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then a JSON config file
(``--config``), then flags given on the command line. Flags win.
The default output root comes from ``$CAVSENTRY_OUT`` (``./runs`` if unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .attacks import load_campaign
from .evalkit import MetricsReport, config_hash
from .pipeline import (
    ConfigError,
    PipelineConfig,
    read_trace,
    run_ablation,
    run_pipeline,
    stage_amplify,
    stage_detect,
    stage_eval,
    stage_inject,
    stage_synth,
    stage_train,
    write_manifest,
    write_report,
)
from .sentinel import malicious_set

OUT_ENV = "CAVSENTRY_OUT"

# flag dest -> PipelineConfig field
FLAG_FIELDS = {
    "seed": "seed", "length": "length", "attack": "attack", "rate": "rate",
    "window": "window", "stride": "stride", "label_rule": "label_rule",
    "alpha": "alpha", "beta": "beta", "amp_mode": "amp_mode", "calibrate_k": "calibrate_k",
    "epochs": "epochs", "batch": "batch", "lr": "lr", "cpk": "channels_per_kernel",
    "threshold_T": "threshold_T", "train_fraction": "train_fraction", "split": "split_strategy",
    "train_seed": "train_seed", "class_weights": "class_weights",
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message} (see --help)\n")


def _sensor_arg(text: str):
    if text == "all":
        return "all"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"sensor must be an index or 'all', got {text!r}") from None


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cavsentry", description="Sensor attack injection, detection and attribution.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--out", help=f"output directory (default ${OUT_ENV}/<command> or ./runs/<command>)")
    _add(common, "--seed", type=int, help="master seed (default 7)")
    _add(common, "--config", help="JSON file of config values; explicit flags override it")

    attack = argparse.ArgumentParser(add_help=False)
    _add(attack, "--attack", choices=["instant", "constant", "gradual", "bias"])
    _add(attack, "--sensor", type=_sensor_arg, help="victim sensor index, or 'all'")
    _add(attack, "--rate", type=float, help="fraction of samples to corrupt")

    amp = argparse.ArgumentParser(add_help=False)
    _add(amp, "--window", type=int)
    _add(amp, "--stride", type=int)
    _add(amp, "--label-rule", dest="label_rule", choices=["any", "majority"])
    _add(amp, "--train-fraction", dest="train_fraction", type=float)
    _add(amp, "--split", choices=["contiguous", "shuffled"])
    _add(amp, "--alpha", type=float, help="fixed threshold (default: calibrated on normal training windows)")
    _add(amp, "--beta", type=float)
    _add(amp, "--amp-mode", dest="amp_mode", choices=["multiply", "additive"])
    _add(amp, "--calibrate-k", dest="calibrate_k", type=float)
    amp.add_argument("--no-amplify", action="store_true", default=None)

    trn = argparse.ArgumentParser(add_help=False)
    _add(trn, "--epochs", type=int)
    _add(trn, "--batch", type=int)
    _add(trn, "--lr", type=float)
    _add(trn, "--cpk", type=int, help="output channels per kernel size")
    _add(trn, "--class-weights", dest="class_weights", choices=["none", "inverse"],
         help="loss weighting for the rare anomaly class (default none)")
    _add(trn, "--train-seed", dest="train_seed", type=int, help="model init/shuffle seed (default: --seed)")

    det = argparse.ArgumentParser(add_help=False)
    _add(det, "--threshold-T", dest="threshold_T", type=float)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic clean trace")
    _add(p, "--length", type=int)

    p = sub.add_parser("inject", parents=[common, attack], help="corrupt one sensor of a trace")
    _add(p, "--input", required=True, help="clean trace CSV")
    _add(p, "--campaign", help="INI campaign file (replaces --attack/--sensor/--rate)")

    p = sub.add_parser("amplify", parents=[common, amp], help="window, split and amplify an injected trace")
    _add(p, "--input", required=True, help="injected trace CSV")
    _add(p, "--log", help="injection log CSV (labels); defaults to injection_log.csv next to --input")

    p = sub.add_parser("train", parents=[common, trn], help="train a detector on a window set")
    _add(p, "--input", required=True, help="training window set (.csws)")

    p = sub.add_parser("eval", parents=[common], help="score a trained detector on a window set")
    _add(p, "--input", required=True, help="test window set (.csws)")
    _add(p, "--model", required=True, help="model file (.csmd)")
    _add(p, "--norm", help="normalization stats (default: norm.json next to --model)")
    _add(p, "--sensor-name", dest="sensor_name", help="row name in the report (default: 'detector')")

    p = sub.add_parser("detect", parents=[common, det], help="attribute anomalies to sensors")
    _add(p, "--input", required=True, help="incoming trace CSV to scan")
    _add(p, "--clean", required=True, help="clean trace CSV the filters are fitted on")

    for name, helptext in (("pipeline", "run amplify, train/eval and detect end to end"),
                           ("ablate", "run the pipeline with and without amplification")):
        p = sub.add_parser(name, parents=[common, attack, amp, trn, det], help=helptext)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--synth", action="store_true", help="use a synthetic clean trace (default)")
        _add(src, "--input", help="clean trace CSV")
        _add(p, "--length", type=int, help="synthetic trace length")
        p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    return parser


def resolve_config(args) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: top level must be an object")
        values.update(loaded)
    for dest, fname in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[fname] = v
    if getattr(args, "no_amplify", None):
        values["amplify"] = False
    sensor = getattr(args, "sensor", None)
    if sensor is not None:
        values["sensors"] = [0, 1, 2] if sensor == "all" else [sensor]
    valid = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(values) - valid)
    if unknown:
        raise CliError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return PipelineConfig.from_dict(values)
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _need(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _echo(command: str, cfg: PipelineConfig, out: Path) -> None:
    print(f"# {command} config_hash={config_hash(cfg.to_dict())} out={out}", file=sys.stderr)
    print(f"# config {json.dumps(cfg.to_dict(), sort_keys=True)}", file=sys.stderr)


def _single_victim(cfg: PipelineConfig) -> int:
    if len(cfg.sensors) != 1:
        raise CliError("this command needs exactly one --sensor index")
    return cfg.sensors[0]


def _manifest(out, command, cfg, inputs, outputs):
    write_manifest(out, command, cfg.to_dict(), cfg.seeds(), {k: str(v) for k, v in inputs.items()},
                   [Path(p) for p in outputs])


def cmd_synth(args, cfg, out):
    path = stage_synth(cfg, out)
    _manifest(out, "synth", cfg, {}, [path])
    print(path)


def cmd_inject(args, cfg, out):
    src = _need(args.input, "input trace")
    campaign = load_campaign(_need(args.campaign, "campaign file")) if args.campaign else None
    victim = None if campaign else _single_victim(cfg)
    trace_path, log_path = stage_inject(src, cfg, victim, out, campaign)
    _manifest(out, "inject", cfg, {"input": src, "campaign": args.campaign or ""}, [trace_path, log_path])
    print(trace_path)
    print(log_path)


def cmd_amplify(args, cfg, out):
    src = _need(args.input, "input trace")
    log_path = _need(args.log or src.parent / "injection_log.csv", "injection log")
    train_path, test_path = stage_amplify(src, log_path, cfg, out)
    _manifest(out, "amplify", cfg, {"input": src, "log": log_path},
              [train_path, test_path, Path(out) / "amplify.json"])
    print(train_path)
    print(test_path)


def cmd_train(args, cfg, out):
    src = _need(args.input, "training window set")
    model_path, norm_path, history = stage_train(src, cfg, out)
    _manifest(out, "train", cfg, {"input": src}, [model_path, norm_path, Path(out) / "history.jsonl"])
    if history:
        print(f"epoch {history[-1]['epoch']} loss {history[-1]['loss']:.6f} accuracy {history[-1]['accuracy']:.4f}")
    print(model_path)


def cmd_eval(args, cfg, out):
    model_path = _need(args.model, "model file")
    norm_path = _need(args.norm or model_path.parent / "norm.json", "normalization stats")
    src = _need(args.input, "test window set")
    cm = stage_eval(model_path, norm_path, src, out)
    report = MetricsReport(metadata={"seed": cfg.seed, "config_hash": config_hash(cfg.to_dict())})
    report.add(args.sensor_name or "detector", cm)
    paths = write_report(report, out)
    _manifest(out, "eval", cfg, {"model": model_path, "norm": norm_path, "input": src},
              paths + [Path(out) / "predictions.csv"])
    print(report.table())


def cmd_detect(args, cfg, out):
    clean = _need(args.clean, "clean trace")
    src = _need(args.input, "input trace")
    verdicts, _ = stage_detect(clean, src, cfg, out)
    _manifest(out, "detect", cfg, {"clean": clean, "input": src}, [Path(out) / "verdicts.csv"])
    names = read_trace(src).names
    for v in verdicts:
        print(f"{names[v.sensor]}\tflags={len(v.flag_events)}")
    flagged = malicious_set(verdicts)
    print("malicious: " + (" ".join(f"{names[s]}({s})" for s in flagged) or "none"))


def _source(args):
    return _need(args.input, "input trace") if args.input else None


def cmd_pipeline(args, cfg, out):
    result = run_pipeline(cfg, out, _source(args), figures=not args.no_figures)
    report = result["report"]
    print(report.table())
    print("---")
    for name, s in report.sensors.items():
        flagged = ",".join(str(m) for m in s["malicious"]) or "none"
        print(f"victim={name}\taccuracy={s['accuracy']:.4f}\tf1={s['f1']:.4f}\tmalicious={flagged}")
    print("malicious sensors: " + (" ".join(str(s) for s in result["malicious"]) or "none"))


def cmd_ablate(args, cfg, out):
    result = run_ablation(cfg, out, _source(args), figures=not args.no_figures)
    print(f"{'sensor':<18}{'f1_with':>10}{'f1_without':>12}")
    for name, (a, b) in result.f1_pairs().items():
        print(f"{name:<18}{a:>10.4f}{b:>12.4f}")


COMMANDS = {
    "synth": cmd_synth, "inject": cmd_inject, "amplify": cmd_amplify, "train": cmd_train,
    "eval": cmd_eval, "detect": cmd_detect, "pipeline": cmd_pipeline, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        _echo(args.command, cfg, out)
        COMMANDS[args.command](args, cfg, out)
    except CliError as exc:
        print(f"cavsentry {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"cavsentry {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
