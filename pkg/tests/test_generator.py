from __future__ import annotations

from collections import Counter

import pytest

from archsleuth.generator import (GenConfig, GenerationError, block_pattern, generate,
                                  generate_dataset, resnet18_family, split_indices, vgg_family)
from archsleuth.graph import KINDS, LayerKind, validate_graph

K = LayerKind


def test_thousand_seeds_valid_with_fixed_io_and_full_coverage():
    cfg = GenConfig()
    seen = Counter()
    for seed in range(1000):
        g = generate(cfg.with_seed(seed))
        assert validate_graph(g) == [], seed
        first, last = g.nodes[0].dims, g.nodes[-1].dims
        assert (first.n, first.ic, first.ih, first.iw) == cfg.fixed_input
        assert g.output_size == cfg.fixed_output_classes * cfg.fixed_input[0]
        seen.update(g.kinds())
    assert set(seen) == set(KINDS)


def test_chain_weights_give_pure_chain():
    cfg = GenConfig(seed=3, block_weights=(1.0, 0.0, 0.0), fc_threshold=0)
    for seed in range(30):
        g = generate(cfg.with_seed(seed))
        assert validate_graph(g) == []
        kinds = set(g.kinds())
        assert K.ADD not in kinds and K.CONCAT not in kinds
        assert g.position_edges() == {(i, i + 1) for i in range(len(g) - 1)}


def test_determinism():
    assert generate(GenConfig(seed=11)) == generate(GenConfig(seed=11))


def test_dataset_split_sizes_and_disjoint():
    tr, va = generate_dataset(GenConfig(seed=5), 10, 0.8)
    assert (len(tr), len(va)) == (8, 2)
    assert not {s.index for s in tr} & {s.index for s in va}
    a, b = split_indices(1, 8500, 0.8)
    assert (len(a), len(b)) == (6800, 1700)


def test_bad_configs():
    with pytest.raises(GenerationError):
        generate_dataset(GenConfig(), 0, 0.8)
    with pytest.raises(GenerationError):
        GenConfig(block_weights=(0.5, 0.5, 0.5))
    with pytest.raises(GenerationError):
        GenConfig(concat_branch_range=(1, 3))


def test_add_shortcut_projection_when_dims_change():
    g = resnet18_family()
    seq = [k.value for k in g.kinds()]
    text = " ".join(seq)
    assert "conv bn conv bn add" in text


def test_reference_families():
    g = resnet18_family()
    assert validate_graph(g) == []
    assert block_pattern(g.kinds()) == ["B0", "B1", "B1", "B2", "B1", "B2", "B1", "B2", "B3", "F1"]
    v = vgg_family()
    assert validate_graph(v) == []
    assert K.ADD not in v.kinds()
