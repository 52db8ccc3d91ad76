import numpy as np

from emloc.lora import LoraModule
from emloc.model import Layer, Network


def random_net(rng, dims, activations=None, rank=None, bias=True):
    """Dense MLP with optional random (non-zero) adapters on every layer."""
    layers = []
    n = len(dims) - 1
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = activations[i] if activations else ("identity" if i == n - 1 else "tanh")
        lora = None
        if rank:
            r = min(rank, d_in, d_out)
            lora = LoraModule(rng.standard_normal((d_in, r)) * 0.3, rng.standard_normal((r, d_out)) * 0.3)
        layers.append(Layer(
            rng.standard_normal((d_in, d_out)) / np.sqrt(d_in),
            0.1 * rng.standard_normal(d_out) if bias else None,
            lora,
            act,
        ))
    return Network(layers)


def random_grid_net(rng):
    """Small random net for gradient checks: mixed activations, factored hosts, partial adapters."""
    from emloc.emulator import FactorizedWeight
    from emloc.model import ACTIVATIONS

    n_layers = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 33, size=n_layers + 1)]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if rng.random() < 0.3 and min(d_in, d_out) > 1:
            n = int(rng.integers(1, min(d_in, d_out) + 1))
            weight = FactorizedWeight(rng.standard_normal((d_in, n)) / np.sqrt(d_in), rng.standard_normal((n, d_out)))
        else:
            weight = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        lora = None
        if i == 0 or rng.random() < 0.8:
            r = int(rng.integers(1, min(4, d_in, d_out) + 1))
            lora = LoraModule(rng.standard_normal((d_in, r)) * 0.5, rng.standard_normal((r, d_out)) * 0.5)
        bias = 0.1 * rng.standard_normal(d_out) if rng.random() < 0.5 else None
        layers.append(Layer(weight, bias, lora, str(rng.choice(ACTIVATIONS))))
    return Network(layers)


def lora_gradient_pairs(net, x, target, kind, h=1e-5):
    """Analytic LoRA gradients and central differences of the loss, flattened in the same order."""
    from emloc.model import backward_lora, forward, loss

    pred, tape = forward(net, x, mode="training")
    _, grad = loss(pred, target, kind)
    grads = backward_lora(net, tape, grad)
    analytic, numeric = [], []
    for i, layer in enumerate(net.layers):
        if layer.lora is None:
            continue
        for name, g in zip(("w_a", "w_b"), grads.lora[i]):
            param = getattr(layer.lora, name)
            for idx in np.ndindex(param.shape):
                old = param[idx]
                param[idx] = old + h
                up = loss(forward(net, x)[0], target, kind)[0]
                param[idx] = old - h
                down = loss(forward(net, x)[0], target, kind)[0]
                param[idx] = old
                analytic.append(g[idx])
                numeric.append((up - down) / (2 * h))
    return np.array(analytic), np.array(numeric)


def gradient_violation(analytic, numeric, rel=1e-5, floor=1e-8):
    """Largest |a - n| / (rel * max(|a|, |n|) + floor); the check passes when this is <= 1."""
    err = np.abs(analytic - numeric)
    allowed = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    return float(np.max(err / allowed)) if err.size else 0.0
