"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "cavsentry",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # drop the creation-date metadata so reruns give identical files
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def metric_bars(report, path) -> Path:
    """Accuracy and F1 per victim sensor, side by side."""
    names = list(report.sensors)
    acc = [report.sensors[n]["accuracy"] for n in names]
    f1 = [report.sensors[n]["f1"] for n in names]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(names), 3.0))
        ax.bar(x - 0.18, acc, 0.36, label="accuracy", color="#4c72b0")
        ax.bar(x + 0.18, f1, 0.36, label="F1", color="#dd8452")
        for xi, (a, f) in enumerate(zip(acc, f1)):
            ax.text(xi - 0.18, a + 0.01, f"{a:.3f}", ha="center", fontsize=7)
            ax.text(xi + 0.18, f + 0.01, f"{f:.3f}", ha="center", fontsize=7)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1.1)
        ax.set_title(f"{report.metadata.get('attack', '')} attack, seed {report.metadata.get('seed', '')}")
        ax.legend(loc="lower right")
        return _save(fig, path)


def confusion_grid(report, path) -> Path:
    names = list(report.sensors)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 2.6), squeeze=False)
        for ax, name in zip(axes[0], names):
            grid = report.confusion_of(name).as_grid()
            ax.imshow(grid, cmap="Blues")
            for (i, j), v in np.ndenumerate(grid):
                ax.text(j, i, str(v), ha="center", va="center",
                        color="white" if v > grid.max() / 2 else "black")
            ax.set_xticks([0, 1], ["normal", "anomaly"])
            ax.set_yticks([0, 1], ["normal", "anomaly"])
            ax.set_xlabel("predicted")
            ax.set_title(name)
        axes[0][0].set_ylabel("true")
        return _save(fig, path)


def kalman_trace(readings, predictions, flag_indices, T: float, sample_period: float, sensor: str,
                 path) -> Path:
    """Observed readings against filter predictions, with flagged readings marked."""
    t = np.arange(len(readings)) * sample_period
    flags = np.asarray(list(flag_indices), dtype=np.int64)
    with plt.rc_context(STYLE):
        fig, (ax, ax_gap) = plt.subplots(2, 1, figsize=(8, 4.2), sharex=True,
                                         gridspec_kw={"height_ratios": [2, 1]})
        ax.plot(t, readings, lw=0.7, color="0.3", label="observed")
        ax.plot(t, predictions, lw=0.7, color="#4c72b0", label="predicted")
        if flags.size:
            ax.scatter(t[flags], np.asarray(readings)[flags], s=6, color="#c44e52", zorder=3,
                       label=f"flagged ({flags.size})")
        ax.set_ylabel(sensor)
        ax.legend(loc="upper right", ncol=3)
        ax_gap.plot(t, np.abs(np.asarray(readings) - np.asarray(predictions)), lw=0.6, color="0.3")
        ax_gap.axhline(T, color="#c44e52", ls="--", lw=0.8)
        ax_gap.set_yscale("symlog", linthresh=1.0)
        ax_gap.set_ylabel("|gap|")
        ax_gap.set_xlabel("time (s)")
        return _save(fig, path)


def training_curves(histories: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 2.6))
        for name, hist in histories.items():
            ep = [h["epoch"] for h in hist]
            a.plot(ep, [h["loss"] for h in hist], label=name)
            b.plot(ep, [h["accuracy"] for h in hist], label=name)
        a.set_xlabel("epoch")
        a.set_ylabel("loss")
        b.set_xlabel("epoch")
        b.set_ylabel("train accuracy")
        b.legend(loc="lower right")
        return _save(fig, path)


def ablation_bars(result, path) -> Path:
    pairs = result.f1_pairs()
    names = list(pairs)
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(names), 3.0))
        ax.bar(x - 0.18, [pairs[n][0] for n in names], 0.36, label="with amplification", color="#55a868")
        ax.bar(x + 0.18, [pairs[n][1] for n in names], 0.36, label="without", color="0.6")
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1.1)
        ax.set_ylabel("F1")
        ax.legend(loc="lower right")
        return _save(fig, path)


def pipeline_figures(report, runs, out) -> List[Path]:
    from .pipeline import read_trace

    out = Path(out) / "figures"
    paths = [metric_bars(report, out / "metrics.png"), confusion_grid(report, out / "confusion.png")]
    hist = {r.sensor: r.history for r in runs if r.history}
    if hist:
        paths.append(training_curves(hist, out / "training.png"))
    T = float(report.metadata.get("threshold_T", 2.0))
    for r in runs:
        incoming = read_trace(r.trace_path)
        v = r.victim
        flagged = [e.index for e in r.verdicts[v].flag_events]
        paths.append(kalman_trace(incoming.matrix()[v], r.predictions[v], flagged, T, incoming.sample_period,
                                  r.sensor, out / f"kalman_{r.sensor}.png"))
    return paths
