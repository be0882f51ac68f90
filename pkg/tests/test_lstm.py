from __future__ import annotations

import json

import numpy as np
import pytest

from archsleuth.features import NormStats
from archsleuth.identifier.ctc import ctc_loss
from archsleuth.identifier.lstm import (ALPHABET, CheckpointError, IdentifierModel, checkpoint_dict,
                                        ctc_grad, load_checkpoint, lstm_forward, model_from_dict,
                                        save_checkpoint)

from oracles import numeric_grad, rel_err


def test_zero_model_is_uniform():
    m = IdentifierModel.zeros(hidden_dim=4)
    p = lstm_forward(m, np.random.default_rng(0).normal(size=(5, 6))).probs
    assert np.allclose(p, 1 / 8)


def test_rows_are_distributions():
    m = IdentifierModel.init(3, hidden_dim=16)
    p = lstm_forward(m, np.random.default_rng(1).normal(size=(1, 6))).probs
    assert p.shape == (1, 8)
    p = lstm_forward(m, np.random.default_rng(1).normal(size=(40, 6)) * 5).probs
    assert np.all(np.abs(p.sum(1) - 1) < 1e-9) and np.all((p >= 0) & (p <= 1))


def test_shape_errors():
    m = IdentifierModel.init(0, hidden_dim=4)
    with pytest.raises(ValueError):
        lstm_forward(m, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        ctc_grad(m, np.zeros((0, 6)), [1])


def test_batched_matches_single():
    m = IdentifierModel.init(2, hidden_dim=8)
    rng = np.random.default_rng(2)
    xs = [rng.normal(size=(n, 6)) for n in (4, 7)]
    X = np.zeros((2, 7, 6))
    X[0, :4], X[1] = xs
    logits, _ = m.forward(X)
    single, _ = m.forward(xs[0][None])
    assert np.allclose(logits[0, :4], single[0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    m = IdentifierModel.init(5, hidden_dim=6)
    m.by += rng.normal(size=8)
    x = rng.normal(size=(6, 6))
    target = [1, 3, 3]
    _, grads = ctc_grad(m, x, target)
    num = numeric_grad(lambda: ctc_loss(lstm_forward(m, x).probs, target), m.params())
    for k in grads:
        assert rel_err(grads[k], num[k]) < 1e-4, k


def test_saturated_model_has_flat_gradient():
    m = IdentifierModel.zeros(hidden_dim=4)
    m.by[1] = 40.0  # class 1 everywhere with probability ~1
    x = np.random.default_rng(6).normal(size=(3, 6))
    loss, grads = ctc_grad(m, x, [1])
    assert loss < 1e-12
    num = numeric_grad(lambda: ctc_loss(lstm_forward(m, x).probs, [1]), m.params())
    for k in grads:
        assert np.max(np.abs(grads[k])) < 1e-12 and np.max(np.abs(num[k])) < 1e-9


def test_checkpoint_roundtrip(tmp_path):
    m = IdentifierModel.init(1, hidden_dim=5)
    m.stats = NormStats(tuple(range(6)), tuple([1.0] * 6))
    path = tmp_path / "ck.json"
    save_checkpoint(m, path, extra={"epoch": 3})
    back = load_checkpoint(path)
    for k, v in m.params().items():
        assert np.array_equal(getattr(back, k), v)
    assert back.stats == m.stats
    assert json.loads(path.read_text())["alphabet"] == list(ALPHABET)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(version="v0"),
    lambda d: d.update(alphabet=["blank"]),
    lambda d: d["weights"]["W"].update(shape=[1, 1]),
    lambda d: d["weights"].pop("Wy"),
    lambda d: d["weights"]["by"]["data"].__setitem__(0, float("nan")),
])
def test_checkpoint_validation(mutate):
    doc = checkpoint_dict(IdentifierModel.init(0, hidden_dim=3))
    mutate(doc)
    with pytest.raises(CheckpointError):
        model_from_dict(doc)


def test_checkpoint_not_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
