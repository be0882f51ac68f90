from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from archsleuth.identifier.metrics import edit_distance, label_error_rate, per_sample_ler

from oracles import edit_distance_rec

seqs = st.lists(st.sampled_from("abc"), max_size=6)


def test_dp_matches_recursion_exhaustively():
    words = [w for n in range(0, 5) for w in itertools.product("abc", repeat=n)]
    for a in words[::3]:
        for b in words:
            assert edit_distance(a, b) == edit_distance_rec(a, b)


@given(seqs, seqs)
def test_dp_matches_recursion_random(a, b):
    assert edit_distance(a, b) == edit_distance_rec(a, b)


@given(seqs, seqs, seqs)
def test_triangle_inequality(a, b, c):
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_examples():
    assert edit_distance(["conv", "bn", "relu"], ["conv", "relu"]) == 1
    assert edit_distance("abc", "abc") == 0


def test_ler_hand_corpus():
    oracle = ["x"] * 73
    pred = ["y"] * 3 + ["x"] * 70
    assert label_error_rate([pred], [oracle]) == pytest.approx(3 / 73, abs=1e-12)
    preds = [list("ab"), list("abc"), list("")]
    oracles = [list("ab"), list("abd"), list("abcd")]
    assert label_error_rate(preds, oracles) == pytest.approx((0 + 1 / 3 + 1) / 3, abs=1e-12)
    assert per_sample_ler(preds, oracles).tolist() == pytest.approx([0, 1 / 3, 1])
    assert label_error_rate(oracles, oracles) == 0.0


def test_ler_errors():
    with pytest.raises(ValueError):
        label_error_rate([["a"]], [[]])
    with pytest.raises(ValueError):
        label_error_rate([["a"]], [["a"], ["b"]])
    with pytest.raises(ValueError):
        label_error_rate([], [])
