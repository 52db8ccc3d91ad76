"""LoRA correction for emulator/full-model misalignment.

A module trained beside an emulator weight ``W_E`` is rewritten so that, on
every input in the span of its input projection, the full weight plus the
corrected module reproduces ``W_E`` plus the original module:

    x^T (W + L_c) = x^T (W_E + L)   for x in col(w_a)

Steps: orthonormalise ``w_a`` by SVD (``w_a = U S V^T`` so ``w_a' = U`` and
``w_b' = S V^T w_b``), measure ``delta = U^T (W - W_E)`` and subtract a
row-wise clamped ``delta`` from ``w_b'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import DimensionError, LinalgError
from .lora import LoraModule

__all__ = [
    "LayerCorrection",
    "CorrectionReport",
    "StructureError",
    "reparameterize",
    "clamp_delta",
    "correction_delta",
    "correct_lora",
    "verify_correction",
    "correct_network",
    "transfer_lora",
]

# Singular values of w_a below this fraction of the largest span no direction.
NULL_TOL = 1e-10


class StructureError(ValueError):
    """Emulator and full network do not correspond layer by layer."""


@dataclass
class LayerCorrection:
    layer: int
    rows_clamped: int
    max_row_correction_ratio: float
    residual: float

    def to_text(self) -> str:
        return (f"layer={self.layer} rows_clamped={self.rows_clamped} "
                f"max_row_correction_ratio={self.max_row_correction_ratio:.17g} "
                f"residual={self.residual:.17g}")


@dataclass
class CorrectionReport:
    lam: float
    layers: list[LayerCorrection] = field(default_factory=list)

    @property
    def rows_clamped(self) -> int:
        return sum(c.rows_clamped for c in self.layers)

    @property
    def max_residual(self) -> float:
        return max((c.residual for c in self.layers), default=0.0)

    def to_text(self) -> str:
        lines = [f"lambda={self.lam:.17g} layers={len(self.layers)} rows_clamped={self.rows_clamped}"]
        lines += [c.to_text() for c in self.layers]
        return "\n".join(lines) + "\n"


def _reparameterize(lora: LoraModule) -> tuple[LoraModule, np.ndarray]:
    dec = linalg.svd(lora.w_a)
    smax = dec.sigma[0] if dec.sigma.size else 0.0
    active = dec.sigma > NULL_TOL * smax if smax > 0 else np.zeros(dec.sigma.shape, dtype=bool)
    w_b = (dec.sigma[:, None] * dec.vt) @ lora.w_b
    return LoraModule(dec.u, w_b), active


def reparameterize(lora: LoraModule) -> LoraModule:
    """Same update ``w_a @ w_b`` with orthonormal input columns."""
    return _reparameterize(lora)[0]


def clamp_delta(delta, w_b_prime, lam: float) -> np.ndarray:
    """Cap each row of ``delta`` at ``lam`` times the norm of the matching ``w_b_prime`` row.

    ``lam = inf`` disables clamping entirely. For finite ``lam`` a zero
    ``w_b_prime`` row zeroes its correction row.
    """
    delta = linalg.as_matrix(delta, "delta")
    w_b_prime = linalg.as_matrix(w_b_prime, "w_b_prime")
    if delta.shape != w_b_prime.shape:
        raise DimensionError(f"delta {delta.shape} and w_b' {w_b_prime.shape} differ in shape")
    if not lam >= 0:
        raise LinalgError(f"lambda must be non-negative, got {lam}")
    if math.isinf(lam):
        return delta.copy()
    d_norm = np.linalg.norm(delta, axis=1)
    cap = lam * np.linalg.norm(w_b_prime, axis=1)
    over = d_norm > cap
    scale = np.ones_like(d_norm)
    scale[over] = cap[over] / d_norm[over]
    return delta * scale[:, None]


def _dense(w) -> np.ndarray:
    return w.dense() if hasattr(w, "dense") else linalg.as_matrix(w, "w")


def correction_delta(basis: np.ndarray, w, w_emu) -> np.ndarray:
    """``basis^T (W - W_E)`` without materialising a factored ``W_E``."""
    w = _dense(w)
    if basis.shape[0] != w.shape[0]:
        raise DimensionError(f"basis has {basis.shape[0]} rows, weight has {w.shape[0]}")
    if tuple(w_emu.shape) != w.shape:
        raise DimensionError(f"emulator weight {tuple(w_emu.shape)} does not match {w.shape}")
    proj = basis.T @ w
    if hasattr(w_emu, "w_u"):
        return proj - (basis.T @ w_emu.w_u) @ w_emu.w_v
    return proj - basis.T @ w_emu


def correct_lora(lora: LoraModule, w, w_emu, lam: float) -> tuple[LoraModule, LayerCorrection]:
    """Correct ``lora`` (trained beside ``w_emu``) for use beside ``w``.

    Returns the corrected module and its per-layer statistics (layer index 0;
    :func:`correct_network` renumbers).
    """
    if lora.shape != tuple(_dense(w).shape):
        raise DimensionError(f"lora shape {lora.shape} does not match weight {_dense(w).shape}")
    if not lam >= 0:
        raise LinalgError(f"lambda must be non-negative, got {lam}")
    prime, active = _reparameterize(lora)
    delta = correction_delta(prime.w_a, w, w_emu)
    # Directions outside the span of w_a are not constrained.
    delta[~active] = 0.0

    d_norm = np.linalg.norm(delta, axis=1)
    b_norm = np.linalg.norm(prime.w_b, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(d_norm == 0, 0.0, d_norm / b_norm)
    max_ratio = float(ratios[active].max()) if active.any() else 0.0
    rows_clamped = 0 if math.isinf(lam) else int(np.sum(active & (d_norm > lam * b_norm)))

    corrected = LoraModule(prime.w_a, prime.w_b - clamp_delta(delta, prime.w_b, lam))
    residual = verify_correction(lora, corrected, w, w_emu)
    return corrected, LayerCorrection(0, rows_clamped, max_ratio, residual)


def verify_correction(lora: LoraModule, corrected: LoraModule, w, w_emu) -> float:
    """Largest ``||a_i^T (W + L_c) - a_i^T (W_E + L)||`` over an orthonormal basis of col(w_a).

    Zero (to rounding) for an unclamped correction.
    """
    if corrected.shape != lora.shape:
        raise DimensionError(f"corrected shape {corrected.shape} differs from {lora.shape}")
    prime, active = _reparameterize(lora)
    basis = prime.w_a[:, active]
    if basis.shape[1] == 0:
        return 0.0
    gap = correction_delta(basis, w, w_emu)
    diff = gap + (basis.T @ corrected.w_a) @ corrected.w_b - (basis.T @ lora.w_a) @ lora.w_b
    return float(np.max(np.linalg.norm(diff, axis=1)))


def _check_correspondence(net_lora, net_full) -> None:
    if len(net_lora.layers) != len(net_full.layers):
        raise StructureError(f"emulator has {len(net_lora.layers)} layers, full network has {len(net_full.layers)}")
    for i, (a, b) in enumerate(zip(net_lora.layers, net_full.layers)):
        if a.shape != b.shape:
            raise StructureError(f"layer {i}: emulator shape {a.shape} vs full shape {b.shape}")
        if a.activation != b.activation:
            raise StructureError(f"layer {i}: activation {a.activation} vs {b.activation}")


def correct_network(net_lora, net_full, lam: float):
    """Full network carrying corrected (unmerged) copies of every emulator LoRA."""
    _check_correspondence(net_lora, net_full)
    out = net_full.copy()
    report = CorrectionReport(lam)
    for i, (emu_layer, layer) in enumerate(zip(net_lora.layers, out.layers)):
        if emu_layer.lora is None:
            continue
        if layer.lora is not None:
            raise StructureError(f"layer {i} of the full network already carries a LoRA module")
        corrected, stats = correct_lora(emu_layer.lora, layer.dense_weight(), emu_layer.weight, lam)
        stats.layer = i
        layer.lora = corrected
        report.layers.append(stats)
    return out, report


def transfer_lora(net_lora, net_full):
    """Naive transfer: copy emulator LoRA modules onto the full network unchanged."""
    _check_correspondence(net_lora, net_full)
    out = net_full.copy()
    for i, (emu_layer, layer) in enumerate(zip(net_lora.layers, out.layers)):
        if emu_layer.lora is None:
            continue
        if layer.lora is not None:
            raise StructureError(f"layer {i} of the full network already carries a LoRA module")
        layer.lora = emu_layer.lora.copy()
    return out
