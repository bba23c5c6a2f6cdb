"""Smoke tests for figure rendering: every helper writes a non-empty file
for both populated and degenerate inputs."""

import numpy as np
import pytest

from kssdiag import gate, metrics, viz


def report():
    rows = np.array([[1, 0], [0, 1], [1, 1]])
    from kssdiag import data
    matrix = data.AttributeMatrix((1, 2, 3), rows, np.array([True, True, False]),
                                  ("att_1", "att_2"))
    true = np.array([1, 1, 2, 2, 3, 3])
    pred = np.array([1, 2, 2, 2, 3, 3])
    paths = [gate.COARSE] * 4 + [gate.FINE_UNSEEN] * 2
    return metrics.build_report(true, pred, matrix, paths)


def empty_report():
    rows = np.array([[1, 0], [0, 1]])
    from kssdiag import data
    matrix = data.AttributeMatrix((1, 2), rows, np.array([True, True]),
                                  ("att_1", "att_2"))
    return metrics.build_report(np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                                matrix, [])


def check_written(path):
    assert path.is_file()
    assert path.stat().st_size > 0


class TestFigures:
    def test_confusion_heatmap(self, tmp_path):
        out = tmp_path / "confusion.png"
        viz.save_confusion_heatmap(report(), str(out))
        check_written(out)

    def test_confusion_heatmap_empty_report(self, tmp_path):
        out = tmp_path / "confusion.png"
        viz.save_confusion_heatmap(empty_report(), str(out))
        check_written(out)

    def test_accuracy_bars(self, tmp_path):
        out = tmp_path / "accuracy.png"
        viz.save_accuracy_bars(report(), [1, 2], str(out))
        check_written(out)

    def test_accuracy_bars_empty_report(self, tmp_path):
        out = tmp_path / "accuracy.png"
        viz.save_accuracy_bars(empty_report(), [1, 2], str(out))
        check_written(out)

    def test_loss_curves(self, tmp_path):
        out = tmp_path / "loss.png"
        viz.save_loss_curves({"total": [3.0, 2.0, 1.5], "r": [1.0, 0.7, 0.6]},
                             str(out))
        check_written(out)

    def test_loss_curves_empty_series(self, tmp_path):
        out = tmp_path / "loss.png"
        viz.save_loss_curves({"l_ad": []}, str(out))
        check_written(out)

    def test_projection_scatter(self, tmp_path):
        out = tmp_path / "proj.png"
        rng = np.random.default_rng(0)
        viz.save_projection_scatter(rng.uniform(size=(30, 4)),
                                    rng.integers(1, 4, size=30), str(out))
        check_written(out)

    def test_projection_scatter_single_attribute(self, tmp_path):
        out = tmp_path / "proj.png"
        viz.save_projection_scatter(np.linspace(0, 1, 10)[:, None],
                                    np.ones(10, dtype=int), str(out))
        check_written(out)

    def test_projection_scatter_empty(self, tmp_path):
        out = tmp_path / "proj.png"
        viz.save_projection_scatter(np.zeros((0, 3)), np.zeros(0, dtype=int),
                                    str(out))
        check_written(out)
