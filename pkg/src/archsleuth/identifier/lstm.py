"""Single-layer unidirectional LSTM with a softmax head over CTC classes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import N_FEATURES, FeatureSequence, NormStats
from ..graph import KINDS
from .ctc import N_CLASSES, ctc_loss_and_grad

CHECKPOINT_VERSION = "identifier-v1"
ALPHABET = ("blank",) + tuple(k.value for k in KINDS)
PARAMS = ("W", "b", "Wy", "by")


class CheckpointError(ValueError):
    pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PredictionDistribution:
    probs: np.ndarray  # (T, C), rows sum to 1

    def __len__(self) -> int:
        return len(self.probs)


@dataclass
class IdentifierModel:
    """Gate rows of ``W`` and ``b`` are ordered input, forget, output, candidate.

    ``W`` acts on the concatenation [x_t, h_{t-1}].
    """

    W: np.ndarray
    b: np.ndarray
    Wy: np.ndarray
    by: np.ndarray
    stats: NormStats | None = None
    version: str = CHECKPOINT_VERSION

    @property
    def hidden_dim(self) -> int:
        return self.Wy.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim

    @property
    def n_classes(self) -> int:
        return self.Wy.shape[0]

    @classmethod
    def init(cls, seed: int = 0, input_dim: int = N_FEATURES, hidden_dim: int = 128,
             n_classes: int = N_CLASSES) -> "IdentifierModel":
        rng = np.random.default_rng(seed)
        h = hidden_dim
        s = 1.0 / np.sqrt(h)
        W = rng.uniform(-s, s, size=(4 * h, input_dim + h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget-gate bias
        Wy = rng.uniform(-s, s, size=(n_classes, h))
        return cls(W, b, Wy, np.zeros(n_classes))

    @classmethod
    def zeros(cls, input_dim: int = N_FEATURES, hidden_dim: int = 128,
              n_classes: int = N_CLASSES) -> "IdentifierModel":
        h = hidden_dim
        return cls(np.zeros((4 * h, input_dim + h)), np.zeros(4 * h),
                   np.zeros((n_classes, h)), np.zeros(n_classes))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAMS}

    def copy(self) -> "IdentifierModel":
        return IdentifierModel(self.W.copy(), self.b.copy(), self.Wy.copy(), self.by.copy(),
                               self.stats, self.version)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    # ------------------------------------------------------------ forward

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, dict]:
        """Batched forward pass. X is (B, T, input_dim); returns logits (B, T, C)."""
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise ValueError(f"expected (B, T, {self.input_dim}) input, got {X.shape}")
        bsz, t_max, _ = X.shape
        h = self.hidden_dim
        hs = np.zeros((t_max + 1, bsz, h))
        cs = np.zeros((t_max + 1, bsz, h))
        gates = np.empty((t_max, bsz, 4 * h))
        Wx = self.W[:, :self.input_dim]
        Wh = self.W[:, self.input_dim:]
        zx = np.einsum("bti,gi->tbg", X, Wx) + self.b
        for t in range(t_max):
            z = zx[t] + hs[t] @ Wh.T
            g = gates[t]
            g[:, :3 * h] = _sigmoid(z[:, :3 * h])
            g[:, 3 * h:] = np.tanh(z[:, 3 * h:])
            cs[t + 1] = g[:, h:2 * h] * cs[t] + g[:, :h] * g[:, 3 * h:]
            hs[t + 1] = g[:, 2 * h:3 * h] * np.tanh(cs[t + 1])
        H = np.transpose(hs[1:], (1, 0, 2))
        logits = H @ self.Wy.T + self.by
        return logits, {"X": X, "hs": hs, "cs": cs, "gates": gates, "H": H}

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        X, hs, cs, gates, H = cache["X"], cache["hs"], cache["cs"], cache["gates"], cache["H"]
        bsz, t_max, _ = X.shape
        h = self.hidden_dim
        grads = {
            "Wy": np.einsum("btc,bth->ch", dlogits, H),
            "by": dlogits.sum(axis=(0, 1)),
        }
        dH = np.transpose(dlogits @ self.Wy, (1, 0, 2))  # (T, B, h)
        Wh = self.W[:, self.input_dim:]
        dz_all = np.empty((t_max, bsz, 4 * h))
        dh_next = np.zeros((bsz, h))
        dc_next = np.zeros((bsz, h))
        for t in range(t_max - 1, -1, -1):
            g = gates[t]
            i, f, o, c_hat = g[:, :h], g[:, h:2 * h], g[:, 2 * h:3 * h], g[:, 3 * h:]
            tc = np.tanh(cs[t + 1])
            dh = dH[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :h] = dc * c_hat * i * (1.0 - i)
            dz[:, h:2 * h] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * h:3 * h] = dh * tc * o * (1.0 - o)
            dz[:, 3 * h:] = dc * i * (1.0 - c_hat * c_hat)
            dc_next = dc * f
            dh_next = dz @ Wh
        XT = np.transpose(X, (1, 0, 2))
        inp = np.concatenate([XT, hs[:-1]], axis=2).reshape(t_max * bsz, -1)
        dz_flat = dz_all.reshape(t_max * bsz, -1)
        grads["W"] = dz_flat.T @ inp
        grads["b"] = dz_flat.sum(axis=0)
        return grads

    # --------------------------------------------------------- inference

    def predict(self, x: FeatureSequence | np.ndarray) -> PredictionDistribution:
        return lstm_forward(self, x)


def _as_array(x: FeatureSequence | np.ndarray) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, FeatureSequence) else x, dtype=float)


def lstm_forward(m: IdentifierModel, x: FeatureSequence | np.ndarray) -> PredictionDistribution:
    arr = _as_array(x)
    if arr.ndim != 2 or arr.shape[1] != m.input_dim:
        raise ValueError(f"expected (T, {m.input_dim}) features, got {arr.shape}")
    if len(arr) == 0:
        raise ValueError("empty feature sequence")
    logits, _ = m.forward(arr[None])
    return PredictionDistribution(softmax(logits[0]))


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs])
    X = np.zeros((len(seqs), int(lens.max()), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        X[i, :len(s)] = s
    return X, lens


def batch_loss_and_grad(m: IdentifierModel, seqs: Sequence[np.ndarray],
                        targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Per-sequence CTC losses and the gradient of their sum."""
    X, lens = pad_batch(seqs)
    logits, cache = m.forward(X)
    losses, dlogits = ctc_loss_and_grad(logits, targets, lens)
    return losses, m.backward(cache, dlogits)


def ctc_grad(m: IdentifierModel, x: FeatureSequence | np.ndarray,
             target: Sequence[int]) -> tuple[float, dict[str, np.ndarray]]:
    arr = _as_array(x)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("empty feature sequence")
    losses, grads = batch_loss_and_grad(m, [arr], [list(target)])
    return float(losses[0]), grads


# ------------------------------------------------------------ checkpoint


def checkpoint_dict(m: IdentifierModel) -> dict:
    return {
        "version": m.version,
        "input_dim": m.input_dim,
        "hidden_dim": m.hidden_dim,
        "alphabet": list(ALPHABET),
        "stats": m.stats.to_dict() if m.stats else None,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in m.params().items()},
    }


def model_from_dict(doc: dict) -> IdentifierModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if list(doc.get("alphabet", [])) != list(ALPHABET):
        raise CheckpointError("checkpoint alphabet does not match")
    i, h = int(doc["input_dim"]), int(doc["hidden_dim"])
    c = len(ALPHABET)
    want = {"W": (4 * h, i + h), "b": (4 * h,), "Wy": (c, h), "by": (c,)}
    arrays = {}
    for k, shape in want.items():
        w = doc["weights"].get(k)
        if w is None:
            raise CheckpointError(f"missing weight {k}")
        if tuple(w["shape"]) != shape or len(w["data"]) != int(np.prod(shape)):
            raise CheckpointError(f"weight {k} has shape {w['shape']}, expected {list(shape)}")
        arrays[k] = np.array(w["data"], dtype=float).reshape(shape)
    stats = NormStats.from_dict(doc["stats"]) if doc.get("stats") else None
    m = IdentifierModel(stats=stats, **arrays)
    if not m.all_finite():
        raise CheckpointError("checkpoint contains non-finite weights")
    return m


def save_checkpoint(m: IdentifierModel, path: str | Path, extra: dict | None = None) -> None:
    doc = checkpoint_dict(m)
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> IdentifierModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    return model_from_dict(doc)
