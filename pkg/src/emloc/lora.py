"""LoRA adapters: ``x @ host + (x @ w_a) @ w_b``.

There is deliberately no alpha/r scale; any user scale must be folded into
``w_b`` before correction so the correction algebra stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import DimensionError, LinalgError

__all__ = ["LoraModule", "init_lora", "host_apply", "lora_forward", "merge_lora"]


@dataclass
class LoraModule:
    w_a: np.ndarray  # d_in x r
    w_b: np.ndarray  # r x d_out

    def __post_init__(self):
        self.w_a = linalg.as_matrix(self.w_a, "w_a")
        self.w_b = linalg.as_matrix(self.w_b, "w_b")
        if self.w_a.shape[1] != self.w_b.shape[0]:
            raise DimensionError(f"lora factors {self.w_a.shape} and {self.w_b.shape} do not chain")

    @property
    def rank(self) -> int:
        return self.w_a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_a.shape[0], self.w_b.shape[1]

    @property
    def n_params(self) -> int:
        """Trainable parameter count, ``r (d_in + d_out)``."""
        return self.w_a.size + self.w_b.size

    def delta(self) -> np.ndarray:
        """Materialised update ``w_a @ w_b``."""
        return self.w_a @ self.w_b

    def copy(self) -> "LoraModule":
        return LoraModule(self.w_a.copy(), self.w_b.copy())


def init_lora(d_in: int, d_out: int, r: int, seed) -> LoraModule:
    """Gaussian ``w_a`` (std ``1/sqrt(d_in)``) and zero ``w_b``, so the update starts at 0.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if not 1 <= r <= min(d_in, d_out):
        raise LinalgError(f"lora rank {r} out of range [1, {min(d_in, d_out)}]")
    rng = np.random.default_rng(seed)
    w_a = rng.standard_normal((d_in, r)) / np.sqrt(d_in)
    return LoraModule(w_a, np.zeros((r, d_out)))


def host_apply(x: np.ndarray, host) -> np.ndarray:
    """``x @ host`` for a dense matrix or anything exposing ``apply`` (factored weights)."""
    if isinstance(host, np.ndarray):
        return x @ host
    return host.apply(x)


def _host_shape(host) -> tuple[int, int]:
    return tuple(host.shape)


def lora_forward(x, host, lora: LoraModule) -> np.ndarray:
    x = linalg.as_matrix(x, "x")
    d_in, d_out = _host_shape(host)
    if x.shape[1] != d_in:
        raise DimensionError(f"input has {x.shape[1]} columns, host expects {d_in}")
    if lora.shape != (d_in, d_out):
        raise DimensionError(f"lora shape {lora.shape} does not match host {(d_in, d_out)}")
    return host_apply(x, host) + (x @ lora.w_a) @ lora.w_b


def merge_lora(w, lora: LoraModule) -> np.ndarray:
    """Dense ``W + w_a @ w_b``; a factored host is materialised first."""
    w = w.dense() if hasattr(w, "dense") else linalg.as_matrix(w, "w")
    if lora.shape != w.shape:
        raise DimensionError(f"lora shape {lora.shape} does not match weight {w.shape}")
    return w + lora.delta()
