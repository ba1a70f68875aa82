import numpy as np

from segproto.evaluation import ProbeResult
from segproto.plotting import plot_probe, plot_prototype_usage, plot_training_curves, plot_usage_entropy
from segproto.trainer import StepRecord


def _records(n=5):
    return [StepRecord(i, 0, 3.0 - 0.1 * i, 1.0, 4.0 - 0.1 * i, 0.1, 0.2, 10, np.arange(4) + i) for i in range(n)]


def test_figures_are_written(tmp_path):
    plot_training_curves(_records(), tmp_path / "a.png")
    plot_usage_entropy(_records(), tmp_path / "b.png", 4)
    plot_prototype_usage(np.array([3, 0, 5, 1]), tmp_path / "c.png", "usage")
    plot_probe({"x": ProbeResult({0: 0.5, 1: 0.75}, 0.625, 0.6, ())}, tmp_path / "d.png")
    for name in "abcd":
        assert (tmp_path / f"{name}.png").read_bytes()[:4] == b"\x89PNG"
