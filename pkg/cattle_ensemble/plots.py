"""
SVG figures: confusion heatmap, one-vs-rest ROC curves and training
curves.

Figures are built on ``matplotlib.figure.Figure`` directly (no pyplot
state) and saved with a fixed hash salt and no date, so the same
inputs always give the same bytes.
"""

import csv
import io
import logging
from os import PathLike
from pathlib import Path
from typing import NamedTuple, Sequence

import matplotlib
from matplotlib.figure import Figure

from .export import write_atomic
from .labels import CLASS_NAMES
from .metrics import ConfusionMatrix, RocCurve

LOGGER = logging.getLogger("cattle-ensemble")

FIGSIZE = (8, 6)
matplotlib.rcParams["svg.hashsalt"] = "cattle-ensemble"


def save_svg(fig: Figure, outfile: PathLike) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    write_atomic(buf.getvalue(), outfile)


def plot_confusion(cm: ConfusionMatrix, outfile: PathLike) -> Figure:
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=45, ha="right")
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES)
    ax.set_xlabel("Predicted class")
    ax.set_ylabel("True class")
    threshold = cm.counts.max() / 2
    for (i, j), count in sorted(_nonzero(cm)):
        ax.text(
            j, i, str(count), ha="center", va="center",
            color="white" if count > threshold else "black",
        )
    ax.set_title("Confusion matrix (%d errors of %d)" % (cm.errors, cm.total))
    fig.tight_layout()
    save_svg(fig, outfile)
    return fig


def _nonzero(cm: ConfusionMatrix):
    for i, row in enumerate(cm.counts):
        for j, count in enumerate(row):
            if count:
                yield (i, j), int(count)


def plot_roc(curves: Sequence[RocCurve], outfile: PathLike) -> Figure:
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    for curve in curves:
        ax.plot(curve.fpr, curve.tpr, label="%s (AUC %.3f)" % (curve.label.label, curve.auc))
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    save_svg(fig, outfile)
    return fig


class TrainingCurves(NamedTuple):
    epochs: list[float]
    series: dict[str, list[float]]

    def family(self, word: str) -> dict[str, list[float]]:
        return {name: values for name, values in self.series.items() if word in name}


def read_training_csv(path: PathLike) -> TrainingCurves:
    """Read a CSV with an ``epoch`` column and numeric accuracy/loss columns."""
    with open(path, newline="") as infh:
        reader = csv.DictReader(infh)
        if reader.fieldnames is None or "epoch" not in reader.fieldnames:
            raise ValueError("%s: missing 'epoch' column" % path)
        names = [n for n in reader.fieldnames if n != "epoch"]
        epochs: list[float] = []
        series: dict[str, list[float]] = {n: [] for n in names}
        for lineno, row in enumerate(reader, start=2):
            try:
                epochs.append(float(row["epoch"]))
                for name in names:
                    series[name].append(float(row[name]))
            except (TypeError, ValueError):
                raise ValueError("%s: line %d: non-numeric value" % (path, lineno)) from None
    if not epochs:
        raise ValueError("%s: no data rows" % path)
    return TrainingCurves(epochs, series)


def plot_curve_family(curves: TrainingCurves, word: str, ylabel: str, outfile: PathLike) -> Figure:
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    for name, values in curves.family(word).items():
        ax.plot(curves.epochs, values, marker="o", label=name)
    ax.set_xlabel("Epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    save_svg(fig, outfile)
    return fig


def plot_training(curves: TrainingCurves, out_dir: PathLike) -> dict[str, Figure]:
    """``accuracy.svg`` and ``loss.svg`` for whichever columns are present."""
    figures = {}
    for word, ylabel in (("acc", "Accuracy"), ("loss", "Loss")):
        if curves.family(word):
            name = "accuracy.svg" if word == "acc" else "loss.svg"
            figures[name] = plot_curve_family(curves, word, ylabel, Path(out_dir) / name)
    if not figures:
        raise ValueError("no accuracy or loss columns to plot")
    return figures
