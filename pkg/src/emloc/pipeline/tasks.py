"""Synthetic downstream tasks with a controlled domain gap.

A hidden teacher MLP labels anisotropic Gaussian inputs. The released
"base model" is the teacher plus a low-rank perturbation per layer, so
LoRA fine-tuning on the task has something to recover.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import Layer, Network
from .formats import Dataset

__all__ = ["TaskSpec", "SyntheticTask", "generate_task", "input_covariance"]


@dataclass(frozen=True)
class TaskSpec:
    """Task shape and difficulty knobs.

    ``dims`` lists layer widths from input to output; hidden layers use
    ``activation`` and the last layer is linear. ``spectrum_decay`` may be a
    single exponent or one per layer; ``gain`` scales hidden-layer weights.
    """

    dims: tuple[int, ...] = (32, 256)
    activation: str = "tanh"
    kind: str = "regression"
    n_train: int = 2048
    n_eval: int = 1024
    n_calib: int = 64
    noise: float = 0.01
    gap: float = 0.5
    gap_rank: int = 2
    cond: float = 10.0
    spectrum_decay: float | tuple[float, ...] = 0.5
    gain: float = 1.0


@dataclass
class SyntheticTask:
    spec: TaskSpec
    seed: int
    teacher: Network
    base: Network
    train: Dataset
    eval: Dataset
    calib: Dataset
    covariance: np.ndarray


def _streams(seed: int) -> dict[str, np.random.Generator]:
    # One independent stream per component: changing a split size never
    # perturbs the teacher, the gap or the other splits.
    names = ("input", "teacher", "gap", "train", "eval", "calib")
    children = np.random.SeedSequence([seed, 0x454D4C]).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def input_covariance(rng: np.random.Generator, d: int, cond: float) -> np.ndarray:
    """Random-rotation covariance with log-spaced eigenvalues, mean eigenvalue 1."""
    eig = np.geomspace(1.0, 1.0 / cond, d)
    eig *= d / eig.sum()
    q = _orthogonal(rng, d)
    return (q * eig) @ q.T


def _teacher_weight(rng: np.random.Generator, d_in: int, d_out: int, decay: float) -> np.ndarray:
    k = min(d_in, d_out)
    u = _orthogonal(rng, d_in)[:, :k]
    v = _orthogonal(rng, d_out)[:, :k]
    s = (1.0 + np.arange(k)) ** (-decay)
    s *= np.sqrt(d_out / np.sum(s**2))  # Frobenius norm of a 1/sqrt(d_in) Gaussian init
    return (u * s) @ v.T


def _gap(rng: np.random.Generator, w: np.ndarray, rank: int, scale: float) -> np.ndarray:
    g = rng.standard_normal((w.shape[0], rank)) @ rng.standard_normal((rank, w.shape[1]))
    return scale * np.linalg.norm(w) / np.linalg.norm(g) * g


def _sample(rng: np.random.Generator, chol: np.ndarray, teacher: Network, n: int, spec: TaskSpec) -> Dataset:
    from ..model import forward

    x = rng.standard_normal((n, chol.shape[0])) @ chol.T
    out, _ = forward(teacher, x)
    noisy = out + spec.noise * rng.standard_normal(out.shape)
    if spec.kind == "classification":
        return Dataset(x, np.argmax(noisy, axis=1).astype(np.float64), "classification")
    return Dataset(x, noisy, "regression")


def generate_task(seed: int, spec: TaskSpec | None = None, **overrides) -> SyntheticTask:
    """Deterministic task for ``seed``; keyword overrides replace ``TaskSpec`` fields."""
    spec = spec or TaskSpec()
    if overrides:
        spec = TaskSpec(**{**spec.__dict__, **overrides})
    if min(spec.n_train, spec.n_eval, spec.n_calib) < 1:
        raise ValueError("split sizes must be >= 1")
    if len(spec.dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    if spec.cond < 1:
        raise ValueError("covariance condition number must be >= 1")
    rng = _streams(seed)

    cov = input_covariance(rng["input"], spec.dims[0], spec.cond)
    chol = np.linalg.cholesky(cov)

    teacher_layers, base_layers = [], []
    n_layers = len(spec.dims) - 1
    decays = np.broadcast_to(np.asarray(spec.spectrum_decay, dtype=float), (n_layers,))
    for i, (d_in, d_out) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
        act = "identity" if i == n_layers - 1 else spec.activation
        w = _teacher_weight(rng["teacher"], d_in, d_out, decays[i])
        if i < n_layers - 1:
            w *= spec.gain
        bias = 0.1 * rng["teacher"].standard_normal(d_out)
        teacher_layers.append(Layer(w, bias, None, act))
        gap = _gap(rng["gap"], w, min(spec.gap_rank, d_in, d_out), spec.gap) if spec.gap > 0 else 0.0
        base_layers.append(Layer(w + gap, bias.copy(), None, act))
    teacher = Network(teacher_layers)
    base = Network(base_layers)

    return SyntheticTask(
        spec=spec,
        seed=seed,
        teacher=teacher,
        base=base,
        train=_sample(rng["train"], chol, teacher, spec.n_train, spec),
        eval=_sample(rng["eval"], chol, teacher, spec.n_eval, spec),
        calib=_sample(rng["calib"], chol, teacher, spec.n_calib, spec),
        covariance=cov,
    )
