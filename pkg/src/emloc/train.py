"""LoRA fine-tuning (Adam + cosine annealing) and analytic memory accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError
from .model import Network, backward_lora, forward, loss

__all__ = [
    "TrainConfig",
    "AdamState",
    "MemoryBudget",
    "LossPoint",
    "adam_step",
    "cosine_lr",
    "finetune",
    "evaluate",
    "account_memory",
    "loss_kind_for",
]

BYTES_PER_FLOAT = 8
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 4e-5
    iterations: int = 500
    batch_size: int = 16
    lora_rank: int = 8
    lam: float = 3.0
    seed: int = 0
    schedule: str = "cosine"
    train_bias: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr_t: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        new_params.append(p - lr_t * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def loss_kind_for(data) -> str:
    return "softmax_cross_entropy" if getattr(data, "kind", "regression") == "classification" else "mse"


@dataclass(frozen=True)
class LossPoint:
    step: int
    lr: float
    loss: float


def _trainable(net: Network, train_bias: bool):
    slots = []
    for layer in net.layers:
        if layer.lora is not None:
            slots.append((layer.lora, "w_a"))
            slots.append((layer.lora, "w_b"))
        if train_bias and layer.bias is not None:
            slots.append((layer, "bias"))
    return slots


def _flatten_grads(net: Network, grads, train_bias: bool):
    out = []
    for i, layer in enumerate(net.layers):
        if layer.lora is not None:
            out.extend(grads.lora[i])
        if train_bias and layer.bias is not None:
            out.append(grads.bias[i])
    return out


class _Batcher:
    """Epoch-wise shuffled mini-batches from one seeded stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng([seed, 1])
        self.order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self.order.size < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return idx


def finetune(net: Network, data, cfg: TrainConfig) -> tuple[Network, list[LossPoint]]:
    """Train the adapters of a copy of ``net`` on ``data``.

    Base weights are never modified. Returns the trained copy and the
    per-iteration batch losses (recorded before each update).
    """
    if not net.loras():
        raise ValueError("network has no LoRA modules to train")
    kind = loss_kind_for(data)
    trained = net.copy()
    slots = _trainable(trained, cfg.train_bias)
    state = AdamState.zeros_like([getattr(obj, name) for obj, name in slots])
    batches = _Batcher(data.x.shape[0], cfg.batch_size, cfg.seed)
    curve = []
    for step in range(cfg.iterations):
        idx = batches.next()
        pred, tape = forward(trained, data.x[idx], mode="training")
        value, grad = loss(pred, data.y[idx], kind)
        grads = _flatten_grads(trained, backward_lora(trained, tape, grad, train_bias=cfg.train_bias), cfg.train_bias)
        lr_t = cosine_lr(step, cfg.iterations, cfg.lr) if cfg.schedule == "cosine" else cfg.lr
        params = [getattr(obj, name) for obj, name in slots]
        params, state = adam_step(params, grads, state, lr_t)
        for (obj, name), p in zip(slots, params):
            setattr(obj, name, p)
        curve.append(LossPoint(step, lr_t, value))
    return trained, curve


def evaluate(net: Network, data) -> dict[str, float]:
    """Mean loss (and accuracy for classification data) in inference mode."""
    kind = loss_kind_for(data)
    pred, _ = forward(net, data.x)
    value, _ = loss(pred, data.y, kind)
    metrics = {"loss": value}
    if kind == "softmax_cross_entropy":
        metrics["accuracy"] = float(np.mean(np.argmax(pred, axis=1) == data.y.reshape(-1)))
    return metrics


@dataclass
class MemoryBudget:
    """Analytic byte counts at 8 bytes per float."""

    params_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    total_bytes: int = field(init=False)

    def __post_init__(self):
        self.total_bytes = self.params_bytes + self.optimizer_bytes + self.activation_bytes

    def as_dict(self) -> dict[str, int]:
        return {
            "params_bytes": self.params_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "activation_bytes": self.activation_bytes,
            "total_bytes": self.total_bytes,
        }


def account_memory(net: Network, cfg: TrainConfig, mode: str) -> MemoryBudget:
    """Bytes needed to run ``net`` for inference or to fine-tune its adapters.

    In finetune mode, layers without an adapter are counted as if one of
    rank ``cfg.lora_rank`` were attached. Activation memory is the training
    tape (every layer input for ``batch_size`` rows); inference holds only
    the widest single activation.
    """
    if mode not in ("inference", "finetune"):
        raise ValueError(f"unknown accounting mode {mode!r}")
    params = net.base_params()
    if mode == "inference":
        params += net.lora_params()
        width = max(net.dims)
        return MemoryBudget(BYTES_PER_FLOAT * params, 0, BYTES_PER_FLOAT * cfg.batch_size * width)
    adapter = 0
    for layer in net.layers:
        d_in, d_out = layer.shape
        if layer.lora is not None:
            adapter += layer.lora.n_params
        else:
            adapter += min(cfg.lora_rank, d_in, d_out) * (d_in + d_out)
    trainable = adapter
    if cfg.train_bias:
        trainable += sum(layer.bias.size for layer in net.layers if layer.bias is not None)
    params += adapter
    tape = cfg.batch_size * sum(layer.shape[0] for layer in net.layers)
    return MemoryBudget(
        BYTES_PER_FLOAT * params,
        2 * BYTES_PER_FLOAT * trainable,
        BYTES_PER_FLOAT * tape,
    )
