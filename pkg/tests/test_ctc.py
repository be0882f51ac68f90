from __future__ import annotations

import numpy as np
import pytest

from archsleuth.graph import LayerKind
from archsleuth.identifier.ctc import (BLANK, CTCError, beam_decode, collapse, ctc_loss,
                                       ctc_loss_and_grad, decode_labels, encode, greedy_decode,
                                       log_softmax, min_frames, viterbi_align)

from oracles import path_table, random_probs

K = LayerKind


def test_collapse_and_min_frames():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]
    assert min_frames([1, 1, 2]) == 4
    assert decode_labels(encode(["conv", "bn"])) == [K.CONV, K.BN]


def test_certain_path_costs_nothing():
    p = np.zeros((1, 8))
    p[0, encode([K.CONV])[0]] = 1.0
    assert ctc_loss(p, encode([K.CONV])) == 0.0


def test_uniform_three_frames_single_label():
    p = np.zeros((3, 8))
    p[:, :3] = 1.0 / 3.0
    table = path_table(p, 3)
    # a__, _a_, __a, aa_, _aa, aaa; a_a collapses to "aa"
    assert table[(1,)] == pytest.approx(6 / 27, abs=1e-15)
    assert ctc_loss(p, [1]) == pytest.approx(-np.log(6 / 27), abs=1e-12)


def test_dp_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t_max = int(rng.integers(1, 7))
        alpha = int(rng.integers(2, 4))
        p = random_probs(rng, t_max, alpha)
        table = path_table(p, alpha)
        for target, prob in table.items():
            if prob > 0 and target:
                assert ctc_loss(p, list(target)) == pytest.approx(-np.log(prob), abs=1e-10)


def test_infeasible_targets_rejected():
    p = np.full((3, 8), 1 / 8)
    with pytest.raises(CTCError, match="longer than representable"):
        ctc_loss(p, [1, 1, 2])
    with pytest.raises(CTCError):
        ctc_loss(np.zeros((0, 8)), [1])


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 5, 8))
    targets = [[1, 2], [3, 3]]
    t_len = np.array([5, 4])
    loss, g = ctc_loss_and_grad(z, targets, t_len)
    num = np.zeros_like(z)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (ctc_loss_and_grad(zp, targets, t_len)[0].sum()
                    - ctc_loss_and_grad(zm, targets, t_len)[0].sum()) / (2 * h)
    assert np.max(np.abs(num - g)) < 1e-7
    assert np.all(g[1, 4] == 0.0)  # padded frame


def test_exact_beam_equals_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t_max = int(rng.integers(1, 6))
        p = random_probs(rng, t_max, 3)
        table = path_table(p, 3)
        want = max(table, key=table.get)
        assert tuple(beam_decode(p, None)) == want


def test_beam_on_worked_example():
    conv, bn, relu = encode([K.CONV, K.BN, K.RELU])
    p = np.zeros((3, 8))
    p[0, [conv, bn, BLANK]] = [0.8, 0.1, 0.1]
    p[1, [bn, relu, BLANK]] = [0.8, 0.1, 0.1]
    p[2, [relu, bn, BLANK]] = [0.8, 0.1, 0.1]
    table = path_table(p[:, :8], 8)
    assert max(table, key=table.get) == (conv, bn, relu)
    assert decode_labels(beam_decode(p, 8)) == [K.CONV, K.BN, K.RELU]


def test_beam_prefers_total_over_best_path():
    # best single path is blank,blank; the labelling "a" has more total mass
    p = np.zeros((2, 8))
    p[:, BLANK], p[:, 1] = 0.6, 0.4
    assert greedy_decode(p) == []
    assert beam_decode(p, None) == [1]


def test_one_hot_rows_decode_greedily():
    rng = np.random.default_rng(3)
    path = rng.integers(0, 8, size=12)
    p = np.eye(8)[path]
    assert beam_decode(p, 8) == greedy_decode(p) == collapse(path.tolist())


def test_viterbi_alignment_groups_multi_kernel_layers():
    conv, bn = encode([K.CONV, K.BN])
    p = np.full((5, 8), 1e-3)
    for t, c in enumerate([conv, conv, BLANK, bn, bn]):
        p[t, c] = 1.0
    p /= p.sum(1, keepdims=True)
    assert viterbi_align(p, [conv, bn]).tolist() == [0, 0, 0, 1, 1]
    with pytest.raises(CTCError):
        viterbi_align(p, [])
    blank_only = np.zeros((3, 8))
    blank_only[:, BLANK] = 1.0
    with pytest.raises(CTCError):
        viterbi_align(blank_only, [conv])


def test_log_softmax_rows():
    z = np.random.default_rng(4).normal(size=(4, 8)) * 50
    assert np.allclose(np.exp(log_softmax(z)).sum(1), 1.0, atol=1e-12)
