"""Downstream-aware emulator construction.

Each registered linear weight ``W`` (d_in x d_out, applied as ``x @ W``) is
replaced by a factored pair ``w_u @ w_v`` chosen to minimise the
activation-weighted error ``||X^T (W - w_u w_v)||_F``, where the rows of
``X^T`` are layer inputs captured from the original network on a small
calibration set.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import DimensionError, LinalgError, NotPositiveDefiniteError

__all__ = [
    "FactorizedWeight",
    "CalibrationStats",
    "accumulate_activations",
    "regularized_gram",
    "activation_aware_factorize",
    "plain_factorize",
    "rank_for_ratio",
    "build_emulator",
    "weighted_error",
    "network_weighted_error",
]

GRAM_EPS = 1e-6
GRAM_EPS_RETRY = 1e-3


@dataclass
class FactorizedWeight:
    """Low-rank stand-in ``w_u @ w_v`` for a d_in x d_out weight."""

    w_u: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        self.w_u = linalg.as_matrix(self.w_u, "w_u")
        self.w_v = linalg.as_matrix(self.w_v, "w_v")
        if self.w_u.shape[1] != self.w_v.shape[0]:
            raise DimensionError(f"factor shapes {self.w_u.shape} and {self.w_v.shape} do not chain")

    @property
    def rank(self) -> int:
        return self.w_u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_u.shape[0], self.w_v.shape[1]

    @property
    def n_params(self) -> int:
        return self.w_u.size + self.w_v.size

    def dense(self) -> np.ndarray:
        return self.w_u @ self.w_v

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.w_u) @ self.w_v

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        return (g @ self.w_v.T) @ self.w_u.T


@dataclass
class CalibrationStats:
    """Running second moment ``sum_i x_i x_i^T`` of a layer's input rows."""

    gram: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, d_in: int) -> "CalibrationStats":
        return cls(np.zeros((d_in, d_in)), 0)

    @property
    def dim(self) -> int:
        return self.gram.shape[0]


def accumulate_activations(stats: CalibrationStats, x_batch) -> CalibrationStats:
    """Return new stats with ``x_batch``'s rows folded in."""
    x = linalg.as_matrix(x_batch, "x_batch")
    if x.shape[1] != stats.dim:
        raise DimensionError(f"batch has {x.shape[1]} columns, gram side is {stats.dim}")
    return CalibrationStats(stats.gram + x.T @ x, stats.count + x.shape[0])


def regularized_gram(stats: CalibrationStats, eps: float = GRAM_EPS) -> np.ndarray:
    """Mean second moment plus a trace-scaled ridge.

    Singular grams are expected whenever the calibration set is smaller than
    the layer width, hence the ridge.
    """
    if stats.count <= 0:
        raise LinalgError("calibration stats are empty")
    mean = stats.gram / stats.count
    mean = 0.5 * (mean + mean.T)
    ridge = eps * np.trace(stats.gram) / (stats.count * stats.dim)
    return mean + ridge * np.eye(stats.dim)


def whitening_factor(stats: CalibrationStats) -> np.ndarray:
    """Cholesky factor ``L`` of the regularised gram (one retry with a larger ridge)."""
    try:
        return linalg.cholesky(regularized_gram(stats, GRAM_EPS))
    except NotPositiveDefiniteError:
        return linalg.cholesky(regularized_gram(stats, GRAM_EPS_RETRY))


def _check_rank(w: np.ndarray, n: int) -> None:
    k = min(w.shape)
    if not 1 <= n <= k:
        raise LinalgError(f"rank {n} out of range [1, {k}]")


def activation_aware_factorize(w, stats: CalibrationStats, n: int) -> FactorizedWeight:
    """Rank-``n`` factorisation minimising ``||L^T (W - w_u w_v)||_F``.

    ``L`` is the Cholesky factor of the regularised calibration gram. The SVD
    of ``L^T W`` is truncated and un-whitened with a triangular solve; the
    singular values are split evenly between the two factors.
    """
    w = linalg.as_matrix(w, "w")
    if w.shape[0] != stats.dim:
        raise DimensionError(f"weight has {w.shape[0]} input rows, stats cover {stats.dim}")
    _check_rank(w, n)
    low = whitening_factor(stats)
    top = linalg.truncated_svd(low.T @ w, n)
    root = np.sqrt(top.sigma)
    w_u = linalg.solve_lower_triangular(low, top.u * root, transpose=True)
    w_v = root[:, None] * top.vt
    return FactorizedWeight(w_u, w_v)


def plain_factorize(w, n: int) -> FactorizedWeight:
    """Rank-``n`` truncated SVD of ``W`` itself, ignoring activations."""
    w = linalg.as_matrix(w, "w")
    _check_rank(w, n)
    top = linalg.truncated_svd(w, n)
    root = np.sqrt(top.sigma)
    return FactorizedWeight(top.u * root, root[:, None] * top.vt)


def rank_for_ratio(d_in: int, d_out: int, ratio: float) -> int:
    """Kept rank so that ``n (d_in + d_out)`` is about ``ratio`` of ``d_in d_out``.

    ``ratio >= 1`` requests no compression and returns full rank.
    """
    if ratio <= 0:
        raise LinalgError(f"ratio must be positive, got {ratio}")
    full = min(d_in, d_out)
    if ratio >= 1.0:
        return full
    budget = ratio * d_in * d_out
    if budget < d_in + d_out:
        raise LinalgError(f"ratio {ratio} too small for a {d_in}x{d_out} layer (rank would be 0)")
    return max(1, min(full, math.floor(budget / (d_in + d_out))))


def weighted_error(w, approx, x) -> float:
    """``||X^T (W - approx)||_F`` for input rows ``x``."""
    if isinstance(approx, FactorizedWeight):
        return float(np.linalg.norm(x @ w - approx.apply(x)))
    return float(np.linalg.norm(x @ (w - approx)))


def build_emulator(net, calib, ratio: float, *, layers: Iterable[int] | None = None,
                   activation_aware: bool = True):
    """Return a copy of ``net`` with linear weights replaced by factorised ones.

    Layer inputs are captured from a single forward pass of the original
    network over ``calib`` (a Dataset or an input matrix). ``layers`` limits
    factorisation to the given layer indices; others are copied unchanged.
    """
    from .model import forward

    x = getattr(calib, "x", calib)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise LinalgError("calibration set is empty")
    selected = set(range(len(net.layers))) if layers is None else set(layers)

    _, captured = forward(net, x, mode="capture")
    emu = net.copy()
    for i, layer in enumerate(emu.layers):
        if i not in selected:
            continue
        w = layer.dense_weight()
        n = rank_for_ratio(*w.shape, ratio)
        if activation_aware:
            stats = accumulate_activations(CalibrationStats.empty(w.shape[0]), captured[i])
            layer.weight = activation_aware_factorize(w, stats, n)
        else:
            layer.weight = plain_factorize(w, n)
    return emu


def network_weighted_error(net, emu, x) -> float:
    """Root-sum-square of per-layer weighted errors on inputs captured from ``net``.

    Every layer sees the full network's activations, so the figure measures
    factorisation quality alone, not error compounding through depth.
    """
    from .model import forward

    if len(net.layers) != len(emu.layers):
        raise DimensionError("emulator and network differ in depth")
    _, captured = forward(net, x, mode="capture")
    total = 0.0
    for layer, emu_layer, h in zip(net.layers, emu.layers, captured):
        approx = emu_layer.weight if emu_layer.factorized else emu_layer.dense_weight()
        total += weighted_error(layer.dense_weight(), approx, h) ** 2
    return math.sqrt(total)
