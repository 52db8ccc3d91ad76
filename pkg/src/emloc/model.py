"""Desk-scale MLPs: stacked linear layers with optional LoRA and a pointwise nonlinearity.

Row-vector convention throughout: a layer maps ``x`` (batch x d_in) to
``act(x @ W + (x @ w_a) @ w_b + bias)``. Only LoRA factors (and, if asked,
biases) receive gradients; base weights are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import DimensionError
from .lora import LoraModule, host_apply, init_lora

__all__ = [
    "ACTIVATIONS",
    "Layer",
    "Network",
    "Tape",
    "Gradients",
    "TapeError",
    "forward",
    "backward_lora",
    "loss",
    "forward_macs",
    "attach_lora",
    "merge_network",
]

ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("mse", "softmax_cross_entropy")


class TapeError(ValueError):
    """Tape does not belong to the network passed to backward."""


def _activate(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return h
    if kind == "tanh":
        return np.tanh(h)
    if kind == "relu":
        return np.maximum(h, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "tanh":
        return g * (1.0 - np.tanh(h) ** 2)
    if kind == "relu":
        return g * (h > 0)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    """One linear map; ``weight`` is a dense matrix or a FactorizedWeight."""

    weight: object
    bias: np.ndarray | None = None
    lora: LoraModule | None = None
    activation: str = "identity"

    def __post_init__(self):
        if isinstance(self.weight, np.ndarray) or not hasattr(self.weight, "apply"):
            self.weight = linalg.as_matrix(self.weight, "weight")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.shape[1],):
                raise DimensionError(f"bias shape {self.bias.shape} does not match d_out {self.shape[1]}")
        if self.lora is not None and self.lora.shape != self.shape:
            raise DimensionError(f"lora shape {self.lora.shape} does not match layer {self.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.weight.shape)

    @property
    def factorized(self) -> bool:
        return not isinstance(self.weight, np.ndarray)

    def dense_weight(self) -> np.ndarray:
        return self.weight.dense() if self.factorized else self.weight

    def base_params(self) -> int:
        n = self.weight.n_params if self.factorized else self.weight.size
        return n + (0 if self.bias is None else self.bias.size)

    def preactivation(self, x: np.ndarray) -> np.ndarray:
        h = host_apply(x, self.weight)
        if self.lora is not None:
            h = h + (x @ self.lora.w_a) @ self.lora.w_b
        if self.bias is not None:
            h = h + self.bias
        return h

    def copy(self) -> "Layer":
        if self.factorized:
            weight = type(self.weight)(self.weight.w_u.copy(), self.weight.w_v.copy())
        else:
            weight = self.weight.copy()
        return Layer(
            weight,
            None if self.bias is None else self.bias.copy(),
            None if self.lora is None else self.lora.copy(),
            self.activation,
        )


@dataclass
class Network:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].shape[1] != self.layers[i + 1].shape[0]:
                raise DimensionError(
                    f"layer {i} outputs {self.layers[i].shape[1]} but layer {i + 1} expects {self.layers[i + 1].shape[0]}"
                )

    @property
    def d_in(self) -> int:
        return self.layers[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.d_in] + [layer.shape[1] for layer in self.layers]

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])

    def loras(self) -> list[tuple[int, LoraModule]]:
        return [(i, layer.lora) for i, layer in enumerate(self.layers) if layer.lora is not None]

    def base_params(self) -> int:
        return sum(layer.base_params() for layer in self.layers)

    def lora_params(self) -> int:
        return sum(lora.n_params for _, lora in self.loras())

    def linear_params(self) -> int:
        """Stored weight floats, excluding biases and adapters."""
        return sum(layer.weight.n_params if layer.factorized else layer.weight.size for layer in self.layers)


@dataclass
class Tape:
    """Layer inputs saved by a training-mode forward pass."""

    inputs: list[np.ndarray]
    signature: tuple

    @property
    def n_floats(self) -> int:
        return sum(x.size for x in self.inputs)


def _signature(net: Network) -> tuple:
    return tuple((id(layer), id(layer.weight), id(layer.lora), layer.shape) for layer in net.layers)


def forward(net: Network, x, mode: str = "inference"):
    """Run ``net`` on rows of ``x``.

    Returns ``(output, aux)`` where ``aux`` is None (inference), a
    :class:`Tape` (training) or the list of per-layer input matrices
    (capture).
    """
    if mode not in ("inference", "training", "capture"):
        raise ValueError(f"unknown forward mode {mode!r}")
    x = linalg.as_matrix(x, "x")
    if x.shape[1] != net.d_in:
        raise DimensionError(f"input has {x.shape[1]} columns, network expects {net.d_in}")
    saved = []
    for layer in net.layers:
        if mode != "inference":
            saved.append(x)
        x = _activate(layer.activation, layer.preactivation(x))
    if mode == "training":
        return x, Tape(saved, _signature(net))
    if mode == "capture":
        return x, saved
    return x, None


@dataclass
class Gradients:
    """Per-layer gradients; entries are None where a layer has nothing trainable."""

    lora: list[tuple[np.ndarray, np.ndarray] | None]
    bias: list[np.ndarray | None]


def backward_lora(net: Network, tape: Tape, grad_out, *, train_bias: bool = False) -> Gradients:
    """Reverse pass giving d(loss)/d(w_a), d(loss)/d(w_b) for every adapter.

    Pre-activations are recomputed from the taped inputs.
    """
    if not isinstance(tape, Tape) or tape.signature != _signature(net):
        raise TapeError("tape was not produced by a training forward pass of this network")
    g = linalg.as_matrix(grad_out, "grad_out")
    if g.shape != (tape.inputs[0].shape[0], net.d_out):
        raise DimensionError(f"grad_out shape {g.shape} does not match network output")
    n = len(net.layers)
    lora_grads: list = [None] * n
    bias_grads: list = [None] * n
    for i in range(n - 1, -1, -1):
        layer, x = net.layers[i], tape.inputs[i]
        dh = _activation_grad(layer.activation, layer.preactivation(x), g)
        if train_bias and layer.bias is not None:
            bias_grads[i] = dh.sum(axis=0)
        if layer.lora is not None:
            a, b = layer.lora.w_a, layer.lora.w_b
            dh_bt = dh @ b.T
            lora_grads[i] = (x.T @ dh_bt, (x @ a).T @ dh)
        if i == 0:
            break
        if layer.factorized:
            g = layer.weight.apply_transpose(dh)
        else:
            g = dh @ layer.weight.T
        if layer.lora is not None:
            g = g + dh_bt @ a.T
    return Gradients(lora_grads, bias_grads)


def loss(pred, target, kind: str = "mse") -> tuple[float, np.ndarray]:
    """Mean-reduced loss and its gradient with respect to ``pred``.

    For ``softmax_cross_entropy`` the target holds one class index per row.
    """
    pred = linalg.as_matrix(pred, "pred")
    target = np.asarray(target, dtype=np.float64)
    if kind == "mse":
        if target.shape != pred.shape:
            raise DimensionError(f"target shape {target.shape} does not match prediction {pred.shape}")
        diff = pred - target
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    if kind == "softmax_cross_entropy":
        labels = target.reshape(-1)
        if labels.shape[0] != pred.shape[0] or target.size != pred.shape[0]:
            raise DimensionError(f"need one class index per row, got target shape {target.shape}")
        idx = labels.astype(np.int64)
        if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= pred.shape[1]):
            raise ValueError("class indices must be integers in [0, n_classes)")
        z = pred - pred.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(pred.shape[0])
        value = -float(np.mean(log_p[rows, idx]))
        grad = np.exp(log_p)
        grad[rows, idx] -= 1.0
        return value, grad / pred.shape[0]
    raise ValueError(f"unknown loss {kind!r}")


def forward_macs(net: Network, rows: int = 1) -> int:
    """Multiply-accumulates for a forward pass over ``rows`` inputs.

    A factorised layer costs ``n (d_in + d_out)`` per row against ``d_in d_out``
    for a dense one; adapters add ``r (d_in + d_out)``.
    """
    total = 0
    for layer in net.layers:
        d_in, d_out = layer.shape
        total += layer.weight.rank * (d_in + d_out) if layer.factorized else d_in * d_out
        if layer.lora is not None:
            total += layer.lora.rank * (d_in + d_out)
    return total * rows


def attach_lora(net: Network, rank: int, seed: int, layers=None) -> Network:
    """Copy of ``net`` with a freshly initialised adapter on each selected layer.

    Layer ``i`` draws from the seed sequence ``[seed, i]`` so an emulator and
    its full network receive identical adapters.
    """
    out = net.copy()
    selected = range(len(out.layers)) if layers is None else layers
    for i in selected:
        layer = out.layers[i]
        if layer.lora is not None:
            raise ValueError(f"layer {i} already carries a LoRA module")
        r = min(rank, *layer.shape)
        layer.lora = init_lora(*layer.shape, r, [seed, i])
    return out


def merge_network(net: Network) -> Network:
    """Dense network with every adapter folded into its weight."""
    out = net.copy()
    for layer in out.layers:
        if layer.lora is not None:
            layer.weight = layer.dense_weight() + layer.lora.delta()
            layer.lora = None
    return out
