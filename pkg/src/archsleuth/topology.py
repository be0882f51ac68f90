"""Layer connectivity from read-after-write patterns between identified layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import RawIndex
from .graph import (ComputationalGraph, LayerKind, LayerNode, dumps_graph, graph_to_dict,
                    validate_structure)
from .identifier.ctc import CTCError, encode, viterbi_align
from .tracesim import SimTruth, TraceBundle


@dataclass(frozen=True)
class TopologyGraph:
    kinds: tuple[LayerKind, ...]
    edges: frozenset[tuple[int, int]]
    raw_edges: frozenset[tuple[int, int]] = frozenset()  # found by the address scan alone

    def __len__(self) -> int:
        return len(self.kinds)

    def successors(self, i: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == i)

    def predecessors(self, i: int) -> list[int]:
        return sorted(a for a, b in self.edges if b == i)

    def to_graph(self) -> ComputationalGraph:
        """Graph-file view with positions as node ids and no dimensions."""
        nodes = tuple(LayerNode(i, k, None) for i, k in enumerate(self.kinds))
        return ComputationalGraph(nodes, frozenset(self.edges))

    def to_dict(self) -> dict:
        return graph_to_dict(self.to_graph())

    def dumps(self) -> str:
        return dumps_graph(self.to_graph())

    def structural_violations(self) -> list[str]:
        return validate_structure(self.to_graph(), check_arity=False)


def assign_kernels_to_layers(seq: Sequence[LayerKind], probs: np.ndarray) -> np.ndarray:
    """Kernel -> layer position via the most probable CTC alignment of ``seq``."""
    if len(seq) == 0:
        raise CTCError("cannot assign kernels to an empty layer sequence")
    return viterbi_align(probs, encode(seq))


def oracle_assignment(g: ComputationalGraph, truth: SimTruth) -> np.ndarray:
    """Kernel -> layer position taken from simulator ground truth."""
    pos = {nd.id: i for i, nd in enumerate(g.nodes)}
    return np.array([pos[l] for l in truth.kernel_layer], dtype=np.int64)


def raw_layer_edges(t: TraceBundle, assignment: np.ndarray,
                    index: RawIndex | None = None) -> set[tuple[int, int]]:
    """Step 1: (a, b) whenever layer b reads a line that layer a wrote earlier."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != len(t.kernels):
        raise ValueError(f"assignment covers {len(assignment)} kernels, trace has {len(t.kernels)}")
    index = index or RawIndex(t)
    hit = index.writer >= 0
    src = assignment[index.writer[hit]]
    dst = assignment[index.read_kernel[hit]]
    keep = src != dst
    pairs = np.unique(np.stack([src[keep], dst[keep]], axis=1), axis=0) if keep.any() else []
    return {(int(a), int(b)) for a, b in pairs if a < b}


def reconstruct(seq: Sequence[LayerKind], t: TraceBundle, assignment: np.ndarray,
                index: RawIndex | None = None) -> TopologyGraph:
    n = len(seq)
    if n and (np.min(assignment) < 0 or np.max(assignment) >= n):
        raise ValueError("assignment refers to a layer position outside the sequence")
    raw = raw_layer_edges(t, assignment, index) if n else set()
    edges = set(raw)
    has_succ = {a for a, _ in edges}
    # Step 2: a non-final layer without a detected consumer feeds the next layer.
    for i in range(n - 1):
        if i not in has_succ:
            edges.add((i, i + 1))
    return TopologyGraph(tuple(LayerKind(k) for k in seq), frozenset(edges), frozenset(raw))


def edge_f1(pred: set | frozenset, truth: set | frozenset) -> float:
    pred, truth = set(pred), set(truth)
    if not pred and not truth:
        return 1.0
    tp = len(pred & truth)
    if tp == 0:
        return 0.0
    p, r = tp / len(pred), tp / len(truth)
    return 2 * p * r / (p + r)
