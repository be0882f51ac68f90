from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from archsleuth.generator import GenConfig, generate, resnet18_family
from archsleuth.graph import (KINDS, ComputationalGraph, DimensionSpec, GraphFormatError, LayerKind,
                              LayerNode, chain, conv_out, dumps_graph, layer_sequence_of,
                              loads_graph, validate_graph, validate_structure)

K = LayerKind


def conv_relu():
    c = DimensionSpec(1, 3, 8, 8, 16, 8, 8, 3, 1, 1)
    r = DimensionSpec(1, 16, 8, 8, 16, 8, 8)
    return chain([(K.CONV, c), (K.RELU, r)])


def test_vocabulary_is_seven_lowercase_tokens():
    assert [k.value for k in KINDS] == ["conv", "fc", "bn", "relu", "pool", "add", "concat"]


def test_minimal_chain_is_valid():
    assert validate_graph(conv_relu()) == []


def test_conv_formula_violation_reported_once():
    bad = DimensionSpec(1, 1, 5, 5, 1, 4, 3, 3, 0, 1)  # formula gives 3x3
    errs = validate_graph(chain([(K.CONV, bad)]))
    assert len(errs) == 1 and "formula gives 3" in errs[0]


def test_add_with_three_inputs_is_one_violation():
    d = DimensionSpec(1, 4, 2, 2, 4, 2, 2)
    nodes = [LayerNode(0, K.RELU, d), LayerNode(1, K.BN, d), LayerNode(2, K.RELU, d),
             LayerNode(3, K.ADD, d)]
    g = ComputationalGraph(tuple(nodes), frozenset({(0, 1), (0, 2), (0, 3), (1, 3), (2, 3)}))
    errs = validate_graph(g)
    assert errs == ["node 3: add has 3 inputs, needs 2"]


def test_structure_detects_multiple_sinks_and_order():
    d = DimensionSpec()
    g = ComputationalGraph((LayerNode(0, K.RELU, d), LayerNode(1, K.RELU, d), LayerNode(2, K.RELU, d)),
                           frozenset({(0, 1), (0, 2)}))
    assert any("sink" in e for e in validate_structure(g))
    g2 = ComputationalGraph((LayerNode(0, K.RELU, d), LayerNode(1, K.RELU, d)), frozenset({(1, 0)}))
    assert any("topological" in e for e in validate_structure(g2))


def test_volume_mismatch_along_edge():
    a = DimensionSpec(1, 4, 2, 2, 4, 2, 2)
    b = DimensionSpec(1, 5, 2, 2, 5, 2, 2)
    errs = validate_graph(chain([(K.RELU, a), (K.BN, b)]))
    assert any("volume" in e for e in errs)


def test_layer_sequence_examples():
    assert [k.value for k in layer_sequence_of(conv_relu())] == ["conv", "relu"]
    assert layer_sequence_of(ComputationalGraph(())) == []
    seq = " ".join(k.value for k in layer_sequence_of(resnet18_family()))
    assert seq.startswith("conv bn relu pool conv bn relu conv bn add relu")


def _sliding_windows(size: int, k: int, p: int, s: int) -> int:
    padded = size + 2 * p
    return sum(1 for start in range(0, padded, s) if start + k <= padded)


def test_conv_formula_matches_window_count_exhaustively():
    for size in range(1, 12):
        for k in range(1, 8):
            for p in range(0, 4):
                for s in range(1, 4):
                    assert conv_out(size, k, p, s) == _sliding_windows(size, k, p, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_roundtrip_generated_graphs(seed):
    g = generate(GenConfig(seed=seed))
    assert loads_graph(dumps_graph(g)) == g


def test_unknown_fields_rejected():
    doc = json.loads(dumps_graph(conv_relu()))
    doc["nodes"][0]["colour"] = "red"
    with pytest.raises(GraphFormatError):
        loads_graph(json.dumps(doc))
    doc = json.loads(dumps_graph(conv_relu()))
    doc["nodes"][0]["dims"]["q"] = 1
    with pytest.raises(GraphFormatError):
        loads_graph(json.dumps(doc))
    with pytest.raises(GraphFormatError):
        loads_graph("{not json")
