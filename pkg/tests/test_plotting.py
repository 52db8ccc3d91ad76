import math

from emloc import plotting
from emloc.train import LossPoint

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.read_bytes()[:8] == PNG


def test_loss_curves(tmp_path):
    curves = {s: [LossPoint(i, 0.1, 1.0 / (i + 1 + s)) for i in range(20)] for s in range(3)}
    assert is_png(plotting.plot_loss_curves(curves, tmp_path / "c.png"))


def test_arms(tmp_path):
    per_seed = {"zero_shot": [0.3, 0.31], "emulator": [0.2, 0.25], "naive": [0.22, 0.2], "corrected": [0.05]}
    assert is_png(plotting.plot_arms(per_seed, tmp_path / "sub" / "a.png"))


def test_lambda_sweep_with_zero_lambda(tmp_path):
    assert is_png(plotting.plot_lambda_sweep([0.0, 1.0, 3.0], {0: [0.2, 0.1, 0.1], 1: [0.3, 0.1, 0.12]}, tmp_path / "l.png"))


def test_calib_sweep_without_metric(tmp_path):
    assert is_png(plotting.plot_calib_sweep([8, 64], [0.5, 0.2], [math.nan, math.nan], tmp_path / "k.png"))
