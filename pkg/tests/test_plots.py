"""
Test the SVG figures and the training-curve reader.
"""

import numpy as np
import pytest

from cattle_ensemble.labels import ClassLabel
from cattle_ensemble.metrics import ConfusionMatrix, RocCurve, binary_roc
from cattle_ensemble.plots import plot_confusion, plot_roc, plot_training, read_training_csv

HISTORY = """epoch,train_acc,val_acc,train_loss,val_loss
50,0.953,0.941,0.145,0.160
100,0.971,0.962,0.082,0.101
150,0.980,0.975,0.045,0.062
200,0.982,0.978,0.038,0.055
"""


def test_training_curves(tmp_path):
    (tmp_path / "history.csv").write_text(HISTORY)
    curves = read_training_csv(tmp_path / "history.csv")
    assert curves.epochs == [50.0, 100.0, 150.0, 200.0]
    assert curves.series["train_acc"][1] == 0.971
    figures = plot_training(curves, tmp_path / "out")
    assert sorted(figures) == ["accuracy.svg", "loss.svg"]
    for name, fig in figures.items():
        assert (tmp_path / "out" / name).read_bytes().startswith(b"<?xml")
        lines = fig.axes[0].lines
        assert len(lines) == 2
        for line in lines:
            assert len(line.get_xdata()) == 4
            assert line.get_marker() == "o"


def test_single_row(tmp_path):
    (tmp_path / "h.csv").write_text("epoch,val_loss\n1,0.5\n")
    figures = plot_training(read_training_csv(tmp_path / "h.csv"), tmp_path)
    assert list(figures) == ["loss.svg"]
    assert len(figures["loss.svg"].axes[0].lines[0].get_xdata()) == 1


def test_training_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("epoch,val_acc\n1,0.5\n2,abc\n")
    with pytest.raises(ValueError, match="line 3"):
        read_training_csv(tmp_path / "bad.csv")
    (tmp_path / "noepoch.csv").write_text("step,val_acc\n1,0.5\n")
    with pytest.raises(ValueError, match="epoch"):
        read_training_csv(tmp_path / "noepoch.csv")
    (tmp_path / "empty.csv").write_text("epoch,val_acc\n")
    with pytest.raises(ValueError, match="no data"):
        read_training_csv(tmp_path / "empty.csv")
    (tmp_path / "other.csv").write_text("epoch,lr\n1,0.1\n")
    with pytest.raises(ValueError):
        plot_training(read_training_csv(tmp_path / "other.csv"), tmp_path)


def test_confusion_heatmap(tmp_path, published_counts):
    cm = ConfusionMatrix(published_counts)
    fig = plot_confusion(cm, tmp_path / "confusion.svg")
    texts = [t.get_text() for t in fig.axes[0].texts]
    assert len(texts) == int(np.count_nonzero(published_counts))
    assert "381" in texts
    assert "0" not in texts


def test_svg_bytes_deterministic(tmp_path, published_counts):
    cm = ConfusionMatrix(published_counts)
    plot_confusion(cm, tmp_path / "a.svg")
    plot_confusion(cm, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_roc_figure(tmp_path):
    thresholds, fpr, tpr = binary_roc([True, False, True, False], [0.9, 0.8, 0.3, 0.1])
    curve = RocCurve(ClassLabel.FMD_FOOT, thresholds, fpr, tpr, 0.75)
    fig = plot_roc([curve], tmp_path / "roc.svg")
    # the curve plus the chance diagonal
    assert len(fig.axes[0].lines) == 2
    assert "fmd-foot (AUC 0.750)" in [t.get_text() for t in fig.axes[0].get_legend().get_texts()]
    assert (tmp_path / "roc.svg").exists()
