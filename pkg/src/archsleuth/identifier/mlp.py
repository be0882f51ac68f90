"""Per-kernel MLP baseline that sees no layer context."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..features import N_FEATURES, FeatureSequence
from ..graph import KINDS, LayerKind
from .lstm import softmax
from .optim import Adam


@dataclass
class MLPModel:
    """ReLU hidden layers followed by a softmax over the 7 layer kinds."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, seed: int = 0, input_dim: int = N_FEATURES, hidden: Sequence[int] = (128, 128),
             n_classes: int = len(KINDS)) -> "MLPModel":
        rng = np.random.default_rng(seed)
        dims = [input_dim, *hidden, n_classes]
        ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)) for a, b in zip(dims, dims[1:])]
        return cls(ws, [np.zeros(b) for b in dims[1:]])

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"], out[f"b{i}"] = w, b
        return out

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [X]
        a = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if i == last else np.maximum(z, 0.0)
            acts.append(a)
        return a, acts

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over rows of ``X`` against integer labels ``y``."""
        logits, acts = self.forward(X)
        p = softmax(logits)
        n = len(y)
        loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        d /= n
        grads = {}
        for i in range(len(self.weights) - 1, -1, -1):
            grads[f"W{i}"] = d.T @ acts[i]
            grads[f"b{i}"] = d.sum(axis=0)
            if i:
                d = (d @ self.weights[i]) * (acts[i] > 0)
        return loss, grads

    def to_dict(self) -> dict:
        return {"layers": [{"shape": list(w.shape), "W": w.ravel().tolist(), "b": b.tolist()}
                           for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MLPModel":
        ws, bs = [], []
        for layer in doc["layers"]:
            shape = tuple(layer["shape"])
            ws.append(np.array(layer["W"], dtype=float).reshape(shape))
            bs.append(np.array(layer["b"], dtype=float).reshape(shape[0]))
        return cls(ws, bs)


@dataclass(frozen=True)
class MLPTrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)


def train_mlp(data: Sequence[tuple[np.ndarray, np.ndarray]],
              cfg: MLPTrainConfig = MLPTrainConfig()) -> MLPModel:
    """Fit on (normalized features, per-kernel kind index) pairs, one per trace."""
    X = np.concatenate([x for x, _ in data])
    y = np.concatenate([np.asarray(t, dtype=np.int64) for _, t in data])
    m = MLPModel.init(cfg.seed, X.shape[1], cfg.hidden)
    opt = Adam(m.params(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for a in range(0, len(X), cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            _, g = m.loss_and_grad(X[idx], y[idx])
            opt.step(m.params(), g)
    return m


def mlp_kernel_predictions(m: MLPModel, x: FeatureSequence | np.ndarray) -> np.ndarray:
    arr = np.asarray(x.values if isinstance(x, FeatureSequence) else x, dtype=float)
    if len(arr) == 0:
        return np.zeros(0, dtype=np.int64)
    return m.forward(arr)[0].argmax(axis=1)


def mlp_predict(m: MLPModel, x: FeatureSequence | np.ndarray) -> list[LayerKind]:
    """Per-kernel argmax with consecutive identical predictions merged into one layer."""
    out: list[LayerKind] = []
    for c in mlp_kernel_predictions(m, x):
        k = KINDS[int(c)]
        if not out or out[-1] != k:
            out.append(k)
    return out
