"""Mini-batch Adam training of the LSTM-CTC identifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ctc import CTCError, beam_decode, greedy_decode, min_frames
from .lstm import IdentifierModel, batch_loss_and_grad, lstm_forward
from .metrics import label_error_rate
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    clip_norm: float = 5.0
    seed: int = 0
    hidden_dim: int = 128
    val_beam_width: int | None = 1  # 1 selects greedy decoding for checkpoint selection
    realizations: int = 4  # trace realizations per training graph, cycled by epoch

    def check(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.realizations < 1:
            raise ValueError("realizations must be at least 1")


@dataclass(frozen=True)
class Example:
    x: np.ndarray  # (T, 6) normalized features
    target: tuple[int, ...]  # CTC labels 1..7


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ler: float | None


@dataclass
class TrainResult:
    model: IdentifierModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None


def decode(m: IdentifierModel, x: np.ndarray, beam_width: int | None = 8) -> list[int]:
    p = lstm_forward(m, x).probs
    return greedy_decode(p) if beam_width == 1 else beam_decode(p, beam_width)


def evaluate_ler(m: IdentifierModel, data: Sequence[Example], beam_width: int | None = 8) -> float:
    preds = [decode(m, ex.x, beam_width) for ex in data]
    return label_error_rate(preds, [list(ex.target) for ex in data])


def _batches(lengths: np.ndarray, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Near-equal lengths share a batch to limit padding; jitter varies membership per epoch.
    key = lengths + rng.uniform(0.0, 8.0, size=len(lengths))
    order = np.argsort(key, kind="stable")
    chunks = [order[a:a + size] for a in range(0, len(order), size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def train(data: Sequence[Example], cfg: TrainConfig = TrainConfig(),
          validation: Sequence[Example] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          views: Sequence[Sequence[Example]] = ()) -> TrainResult:
    """Adam on CTC loss; keeps the epoch with the best validation LER.

    ``views`` are extra trace realizations of the same graphs, aligned with
    ``data``; epoch e trains on realization (e - 1) mod (1 + len(views)).
    """
    cfg.check()
    if not data:
        raise ValueError("empty training set")
    sets = [list(data), *[list(v) for v in views]]
    for v in sets[1:]:
        if len(v) != len(data) or any(a.target != b.target for a, b in zip(v, data)):
            raise ValueError("views must hold the same targets as data, in order")
    for v in sets:
        for i, ex in enumerate(v):
            if min_frames(ex.target) > len(ex.x):
                raise ValueError(f"example {i}: target needs {min_frames(ex.target)} frames, has {len(ex.x)}")
    rng = np.random.default_rng(cfg.seed)
    model = IdentifierModel.init(cfg.seed, data[0].x.shape[1], cfg.hidden_dim)
    params = model.params()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    lengths = [np.array([len(ex.x) for ex in v], dtype=float) for v in sets]
    result = TrainResult(model)
    best_ler = np.inf
    best = None
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        r = (epoch - 1) % len(sets)
        data = sets[r]
        for bi, idx in enumerate(_batches(lengths[r], cfg.batch_size, rng)):
            try:
                losses, grads = batch_loss_and_grad(model, [data[i].x for i in idx],
                                                    [list(data[i].target) for i in idx])
            except CTCError as e:  # non-finite scores leave no valid alignment
                raise TrainingDivergence(epoch, bi, str(e)) from e
            n = len(idx)
            grads = {k: g / n for k, g in grads.items()}
            if not np.all(np.isfinite(losses)) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergence(epoch, bi, "non-finite loss or gradient")
            opt.step(params, grads)
            if not model.all_finite():
                raise TrainingDivergence(epoch, bi, "non-finite weights")
            total += float(losses.sum())
        rec = EpochRecord(epoch, total / len(data), None)
        if validation:
            rec.val_ler = evaluate_ler(model, validation, cfg.val_beam_width)
            if rec.val_ler < best_ler:
                best_ler, best, result.best_epoch = rec.val_ler, model.copy(), epoch
        result.history.append(rec)
        log.info("epoch %d loss %.4f val_ler %s", epoch, rec.train_loss, rec.val_ler)
        if on_epoch:
            on_epoch(rec)
    result.model = best if best is not None else model
    return result
