"""Fusion head: a small numpy MLP over concatenated pool probabilities.

Hidden layers are affine + activation, the output layer is affine + softmax.
Training minimises a sample-weighted squared error against one-hot targets
with plain mini-batch gradient descent.  At prediction time the head is only
consulted when the selected pool models disagree on the argmax class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ModelPool

ACTIVATIONS = ("relu", "tanh", "sigmoid")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    input_width: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_widths) != len(self.activations):
            raise ValueError("need one activation per hidden layer")
        if any(w < 1 for w in self.layer_widths) or self.input_width < 1 or self.num_classes < 1:
            raise ValueError("layer widths must be positive")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{a}'")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_width, *self.layer_widths, self.num_classes]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def to_json(self) -> dict:
        return {
            "layers": [
                {"rows": int(w.shape[0]), "cols": int(w.shape[1]),
                 "weights": [float(v) for v in w.ravel()],
                 "bias": [float(v) for v in b]}
                for w, b in zip(self.weights, self.biases)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpParams":
        ws, bs = [], []
        for layer in obj["layers"]:
            ws.append(np.array(layer["weights"], dtype=np.float64).reshape(layer["rows"], layer["cols"]))
            bs.append(np.array(layer["bias"], dtype=np.float64))
        return cls(ws, bs)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.seed < 0:
            raise ValueError("train config values must be positive")


def init_mlp(spec: MlpSpec, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for out_w, in_w in spec.shapes:
        limit = math.sqrt(6.0 / (in_w + out_w))
        ws.append(rng.uniform(-limit, limit, size=(out_w, in_w)))
        bs.append(np.zeros(out_w))
    return MlpParams(ws, bs)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    # numerically safe logistic
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return h * (1.0 - h)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(params: MlpParams, spec: MlpSpec, X: np.ndarray, cache: list | None = None):
    h = X
    for W, b, act in zip(params.weights[:-1], params.biases[:-1], spec.activations):
        z = h @ W.T + b
        out = _act(act, z)
        if cache is not None:
            cache.append((h, z, out))
        h = out
    if cache is not None:
        cache.append((h, None, None))
    return _softmax(h @ params.weights[-1].T + params.biases[-1])


def forward(params: MlpParams, spec: MlpSpec, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_width,):
        raise ValueError(f"input has length {x.size}, expected {spec.input_width}")
    return forward_batch(params, spec, x[None, :])[0]


def weighted_mse(P: np.ndarray, Y: np.ndarray, w: np.ndarray) -> float:
    per_sample = ((P - Y) ** 2).sum(axis=1) / Y.shape[1]
    return float((w * per_sample).sum() / len(w))


def loss_arrays(params: MlpParams, spec: MlpSpec, X, Y, w) -> float:
    return weighted_mse(forward_batch(params, spec, X), Y, w)


def loss(params: MlpParams, spec: MlpSpec, proxy) -> float:
    from .proxy import stack_proxy

    return loss_arrays(params, spec, *stack_proxy(proxy))


def gradient_arrays(params: MlpParams, spec: MlpSpec, X, Y, w):
    """Return ``(loss, grad)`` for a batch, grad shaped like ``params``."""
    cache: list = []
    P = forward_batch(params, spec, X, cache)
    n, m = Y.shape
    diff = P - Y
    batch_loss = float((w * (diff * diff).sum(axis=1)).sum() / (n * m))
    dP = (2.0 / (n * m)) * w[:, None] * diff
    dz = P * (dP - (dP * P).sum(axis=1, keepdims=True))
    n_layers = len(params.weights)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        h_in = cache[layer][0]
        gw[layer] = dz.T @ h_in
        gb[layer] = dz.sum(axis=0)
        if layer > 0:
            dh = dz @ params.weights[layer]
            _, z_prev, h_prev = cache[layer - 1]
            dz = dh * _act_grad(spec.activations[layer - 1], z_prev, h_prev)
    return batch_loss, MlpParams(gw, gb)


def gradient(params: MlpParams, spec: MlpSpec, batch) -> MlpParams:
    from .proxy import stack_proxy

    return gradient_arrays(params, spec, *stack_proxy(batch))[1]


def train_arrays(spec: MlpSpec, X, Y, w, config: TrainConfig,
                 params: MlpParams | None = None) -> MlpParams:
    if len(X) == 0:
        raise ValueError("empty proxy")
    params = init_mlp(spec, config.seed) if params is None else params.copy()
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    n = len(X)
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            batch_loss, g = gradient_arrays(params, spec, X[sel], Y[sel], w[sel])
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"training diverged at epoch {epoch}")
            for W, b, dW, db in zip(params.weights, params.biases, g.weights, g.biases):
                W -= lr * dW
                b -= lr * db
    for W in params.weights:
        if not np.all(np.isfinite(W)):
            raise TrainingDiverged(f"training diverged at epoch {config.epochs - 1}")
    return params


def train(spec: MlpSpec, proxy, config: TrainConfig) -> MlpParams:
    from .proxy import stack_proxy

    return train_arrays(spec, *stack_proxy(proxy), config)


def _selected_rows(pool: ModelPool, selected: Sequence[int], rows: np.ndarray):
    X = np.concatenate([pool[j].probabilities[rows] for j in selected], axis=1)
    votes = np.stack([pool[j].predictions[rows] for j in selected], axis=1)
    return X, votes


def fused_predict_many(pool: ModelPool, selected: Sequence[int], params: MlpParams,
                       spec: MlpSpec, rows) -> np.ndarray:
    """Consensus-routed predictions for dataset rows ``rows``."""
    if not len(selected):
        raise ValueError("no models selected")
    rows = np.asarray(rows, dtype=np.int64)
    X, votes = _selected_rows(pool, selected, rows)
    out = votes[:, 0].copy()
    split = np.flatnonzero((votes != votes[:, :1]).any(axis=1))
    if split.size:
        out[split] = np.argmax(forward_batch(params, spec, X[split]), axis=1)
    return out


def fused_predict(pool: ModelPool, selected: Sequence[int], params: MlpParams,
                  spec: MlpSpec, sample_index: int) -> int:
    return int(fused_predict_many(pool, selected, params, spec, [sample_index])[0])


@dataclass
class TrainedHead:
    spec: MlpSpec
    params: MlpParams
    selected: tuple[int, ...] = field(default=())

    def predict(self, pool: ModelPool, rows) -> np.ndarray:
        return fused_predict_many(pool, self.selected, self.params, self.spec, rows)
