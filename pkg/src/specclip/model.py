"""Fully-connected softmax classifier with per-example gradients.

Parameters have a canonical flat order used by clipping and noising: layers in
forward order, and within a layer the weight matrix (out x in, row-major)
followed by its bias.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .linalg import RngStream, as_matrix

ACTIVATIONS = ("relu", "tanh")
LOSSES = ("softmax_cross_entropy",)


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def dim(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_names(self) -> list[str]:
        return [f"fc{i + 1}" for i in range(self.n_layers)]


@dataclass
class MlpParams:
    cfg: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, cfg: MlpConfig, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (cfg.dim,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({cfg.dim},)")
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
            n = fan_in * fan_out
            weights.append(flat[pos:pos + n].reshape(fan_out, fan_in).copy())
            pos += n
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        return cls(cfg, weights, biases)

    def named_weights(self) -> dict[str, np.ndarray]:
        return dict(zip(self.cfg.layer_names(), self.weights))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array (examples x features)")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the number of examples")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.inputs[idx], self.labels[idx])


def init_params(cfg: MlpConfig, rng: RngStream) -> MlpParams:
    """Fan-in scaled normal initialisation with zero biases.

    Weights of a layer with fan-in ``n`` are N(0, s^2) with ``s = sqrt(2/n)``
    for ReLU (He) and ``s = sqrt(1/n)`` for tanh (LeCun).  Draws are taken
    layer by layer in row-major order.
    """
    gain = 2.0 if cfg.activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
        std = np.sqrt(gain / fan_in)
        weights.append(std * rng.standard_normal(fan_out * fan_in).reshape(fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(cfg, weights, biases)


def init_std(cfg: MlpConfig, fan_in: int) -> float:
    return float(np.sqrt((2.0 if cfg.activation == "relu" else 1.0) / fan_in))


def _act(cfg, z):
    if cfg.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(cfg, z, a):
    if cfg.activation == "relu":
        return (z > 0).astype(np.float64)  # subgradient 0 at 0
    return 1.0 - a * a


def _check_batch(p: MlpParams, b: Batch):
    if b.inputs.shape[1] != p.cfg.layer_sizes[0]:
        raise ValueError(
            f"input dimension {b.inputs.shape[1]} does not match model input {p.cfg.layer_sizes[0]}"
        )
    n_classes = p.cfg.layer_sizes[-1]
    if len(b) and (b.labels.min() < 0 or b.labels.max() >= n_classes):
        raise ValueError("label outside [0, n_classes)")


def _forward(p: MlpParams, x: np.ndarray):
    zs, acts = [], [x]
    a = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if i == last else _act(p.cfg, z)
        acts.append(a)
    return zs, acts


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backward_deltas(p: MlpParams, b: Batch):
    zs, acts = _forward(p, b.inputs)
    logp = _log_softmax(zs[-1])
    n = len(b)
    losses = -logp[np.arange(n), b.labels]
    delta = np.exp(logp)
    delta[np.arange(n), b.labels] -= 1.0
    deltas = [None] * len(p.weights)
    deltas[-1] = delta
    for i in range(len(p.weights) - 1, 0, -1):
        delta = (delta @ p.weights[i]) * _act_grad(p.cfg, zs[i - 1], acts[i])
        deltas[i - 1] = delta
    return losses, deltas, acts


def per_example_grads(p: MlpParams, b: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradients as an ``(|L|, d)`` matrix plus per-example losses.

    Row ``i`` is the gradient of the cross-entropy of example ``i`` in the
    canonical flat order.
    """
    _check_batch(p, b)
    n = len(b)
    if n == 0:
        raise ValueError("per_example_grads needs a non-empty batch")
    losses, deltas, acts = _backward_deltas(p, b)
    out = np.empty((n, p.dim))
    pos = 0
    for i, w in enumerate(p.weights):
        fan_out, fan_in = w.shape
        gw = deltas[i][:, :, None] * acts[i][:, None, :]
        out[:, pos:pos + fan_out * fan_in] = gw.reshape(n, -1)
        pos += fan_out * fan_in
        out[:, pos:pos + fan_out] = deltas[i]
        pos += fan_out
    return out, losses


def batch_gradient(p: MlpParams, b: Batch) -> tuple[np.ndarray, float]:
    """Gradient of the mean loss over ``b`` (flat order) and the mean loss."""
    _check_batch(p, b)
    n = len(b)
    losses, deltas, acts = _backward_deltas(p, b)
    parts = []
    for i in range(len(p.weights)):
        parts.append((deltas[i].T @ acts[i]).ravel() / n)
        parts.append(deltas[i].sum(axis=0) / n)
    return np.concatenate(parts), float(losses.mean())


def apply_update(p: MlpParams, direction: np.ndarray, lr: float) -> MlpParams:
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (p.dim,):
        raise ValueError(f"direction has shape {direction.shape}, expected ({p.dim},)")
    return MlpParams.unflatten(p.cfg, p.flatten() - lr * direction)


def logits(p: MlpParams, x: np.ndarray) -> np.ndarray:
    zs, _ = _forward(p, np.asarray(x, dtype=np.float64))
    return zs[-1]


def evaluate(p: MlpParams, test: Batch) -> tuple[float, float]:
    """Accuracy (argmax, first index on ties) and mean cross-entropy."""
    _check_batch(p, test)
    if len(test) == 0:
        raise ValueError("evaluate needs at least one example")
    z = logits(p, test.inputs)
    logp = _log_softmax(z)
    n = len(test)
    acc = float(np.mean(np.argmax(z, axis=1) == test.labels))
    loss = float(-logp[np.arange(n), test.labels].mean())
    return acc, loss


def kernel_to_matrix(w: np.ndarray) -> np.ndarray:
    """Reshape a conv kernel ``C_out x C_in x k_h x k_w`` to ``C_out x (C_in k_h k_w)``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError("expected a 4-axis kernel")
    return w.reshape(w.shape[0], -1).copy()


def matrix_to_kernel(m: np.ndarray, shape) -> np.ndarray:
    return np.asarray(m, dtype=np.float64).reshape(tuple(shape)).copy()


def probe_matrix(p, layer_ref) -> np.ndarray:
    """The 2-D matrix probed for ``layer_ref``.

    ``p`` is either :class:`MlpParams` (refs ``"fc1"``, ``"fc2"``, ... or a
    0-based layer index) or a mapping of names to weight tensors.  Dense
    weights come back as-is; 4-axis kernels are flattened per output filter.
    """
    if isinstance(p, MlpParams):
        named = p.named_weights()
        if isinstance(layer_ref, (int, np.integer)):
            if not 0 <= layer_ref < len(p.weights):
                raise KeyError(f"no layer with index {layer_ref}")
            layer_ref = f"fc{int(layer_ref) + 1}"
    elif isinstance(p, Mapping):
        named = p
    else:
        raise TypeError("probe_matrix expects MlpParams or a mapping of weight tensors")
    if layer_ref not in named:
        raise KeyError(f"unknown layer {layer_ref!r}; known: {sorted(named)}")
    w = np.asarray(named[layer_ref])
    if w.ndim == 4:
        return as_matrix(kernel_to_matrix(w))
    if w.ndim == 2:
        return as_matrix(w)
    raise ValueError(f"layer {layer_ref!r} has {w.ndim} axes; only 2 or 4 are probeable")
