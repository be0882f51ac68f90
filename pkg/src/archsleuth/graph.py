"""Layer vocabulary and the computational-graph data model.

Volumes are element counts throughout; conversion to bytes happens at the
trace boundary.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable


class LayerKind(str, enum.Enum):
    CONV = "conv"
    FC = "fc"
    BN = "bn"
    RELU = "relu"
    POOL = "pool"
    ADD = "add"
    CONCAT = "concat"

    def __str__(self) -> str:
        return self.value


KINDS: tuple[LayerKind, ...] = tuple(LayerKind)

# kinds whose output shape equals their input shape
SHAPE_PRESERVING = frozenset({LayerKind.BN, LayerKind.RELU, LayerKind.ADD})
# kinds the generator, simulator and estimator treat as "critical"
CRITICAL = frozenset({LayerKind.CONV, LayerKind.FC, LayerKind.ADD, LayerKind.CONCAT})


def conv_out(size: int, k: int, p: int, s: int) -> int:
    """Output extent of a sliding window; <= 0 means the window does not fit."""
    span = size + 2 * p - k
    if span < 0:
        return 0
    return span // s + 1


@dataclass(frozen=True)
class DimensionSpec:
    n: int = 1
    ic: int = 1
    ih: int = 1
    iw: int = 1
    oc: int = 1
    oh: int = 1
    ow: int = 1
    k: int = 1
    p: int = 0
    s: int = 1

    @property
    def in_volume(self) -> int:
        return self.ic * self.ih * self.iw

    @property
    def out_volume(self) -> int:
        return self.oc * self.oh * self.ow

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.ic, self.ih, self.iw)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.oc, self.oh, self.ow)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


DIM_FIELDS = ("n", "ic", "ih", "iw", "oc", "oh", "ow", "k", "p", "s")


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: LayerKind
    dims: DimensionSpec | None = None


@dataclass(frozen=True)
class ComputationalGraph:
    """A DNN architecture; ``nodes`` is stored in execution order."""

    nodes: tuple[LayerNode, ...]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> LayerNode:
        for nd in self.nodes:
            if nd.id == node_id:
                return nd
        raise KeyError(node_id)

    def position(self) -> dict[int, int]:
        return {nd.id: i for i, nd in enumerate(self.nodes)}

    def predecessors(self, node_id: int) -> list[int]:
        pos = self.position()
        return sorted((a for a, b in self.edges if b == node_id), key=pos.__getitem__)

    def successors(self, node_id: int) -> list[int]:
        pos = self.position()
        return sorted((b for a, b in self.edges if a == node_id), key=pos.__getitem__)

    @property
    def input_size(self) -> int:
        if not self.nodes or self.nodes[0].dims is None:
            return 0
        d = self.nodes[0].dims
        return d.n * d.in_volume

    @property
    def output_size(self) -> int:
        if not self.nodes or self.nodes[-1].dims is None:
            return 0
        d = self.nodes[-1].dims
        return d.n * d.out_volume

    def kinds(self) -> list[LayerKind]:
        return [nd.kind for nd in self.nodes]

    def position_edges(self) -> set[tuple[int, int]]:
        """Edges re-expressed over execution positions."""
        pos = self.position()
        return {(pos[a], pos[b]) for a, b in self.edges}


def layer_sequence_of(g: ComputationalGraph) -> list[LayerKind]:
    return [nd.kind for nd in g.nodes]


def _check_dims(nd: LayerNode) -> list[str]:
    d = nd.dims
    out = []
    if d is None:
        return [f"node {nd.id}: missing dims"]
    for name in DIM_FIELDS:
        v = getattr(d, name)
        if name == "p":
            if v < 0:
                out.append(f"node {nd.id}: p={v} < 0")
        elif v < 1:
            out.append(f"node {nd.id}: {name}={v} < 1")
    if out:
        return out
    kind = nd.kind
    if kind in (LayerKind.CONV, LayerKind.POOL):
        oh = conv_out(d.ih, d.k, d.p, d.s)
        ow = conv_out(d.iw, d.k, d.p, d.s)
        if oh != d.oh:
            out.append(f"node {nd.id}: {kind} oh={d.oh} but formula gives {oh}")
        if ow != d.ow:
            out.append(f"node {nd.id}: {kind} ow={d.ow} but formula gives {ow}")
        if kind is LayerKind.POOL and d.oc != d.ic:
            out.append(f"node {nd.id}: pool oc={d.oc} != ic={d.ic}")
    elif kind is LayerKind.FC:
        if (d.ih, d.iw, d.oh, d.ow) != (1, 1, 1, 1):
            out.append(f"node {nd.id}: fc spatial dims must be 1")
    elif kind in (LayerKind.BN, LayerKind.RELU, LayerKind.ADD):
        if d.out_shape != d.in_shape:
            out.append(f"node {nd.id}: {kind} output {d.out_shape} != input {d.in_shape}")
    elif kind is LayerKind.CONCAT:
        if (d.oh, d.ow) != (d.ih, d.iw) or d.oc != d.ic:
            out.append(f"node {nd.id}: concat output {d.out_shape} != input {d.in_shape}")
    return out


def _is_topological(g: ComputationalGraph) -> bool:
    pos = g.position()
    return all(pos[a] < pos[b] for a, b in g.edges)


def validate_structure(g: ComputationalGraph, check_arity: bool = True) -> list[str]:
    """Structural invariants only: ids, DAG order, single source/sink and, optionally, arity."""
    errs: list[str] = []
    ids = [nd.id for nd in g.nodes]
    if len(set(ids)) != len(ids):
        errs.append("duplicate node ids")
        return errs
    idset = set(ids)
    for a, b in sorted(g.edges):
        if a not in idset or b not in idset:
            errs.append(f"edge ({a},{b}) references unknown node")
        elif a == b:
            errs.append(f"self edge on node {a}")
    if errs:
        return errs
    if not g.nodes:
        return errs
    if not _is_topological(g):
        errs.append("node order is not a topological order of the edges")
    indeg = {i: 0 for i in ids}
    outdeg = {i: 0 for i in ids}
    for a, b in g.edges:
        indeg[b] += 1
        outdeg[a] += 1
    sources = [i for i in ids if indeg[i] == 0]
    sinks = [i for i in ids if outdeg[i] == 0]
    if len(sources) != 1:
        errs.append(f"expected one source node, found {len(sources)}")
    if len(sinks) != 1:
        errs.append(f"expected one sink node, found {len(sinks)}")
    if not check_arity:
        return errs
    for nd in g.nodes:
        k = indeg[nd.id]
        if nd.kind is LayerKind.ADD:
            if k != 2:
                errs.append(f"node {nd.id}: add has {k} inputs, needs 2")
        elif nd.kind is LayerKind.CONCAT:
            if k < 2:
                errs.append(f"node {nd.id}: concat has {k} inputs, needs >= 2")
        elif k > 1:
            errs.append(f"node {nd.id}: {nd.kind} has {k} inputs, needs 1")
        elif k == 0 and nd.id != ids[0]:
            errs.append(f"node {nd.id}: {nd.kind} has no input")
    return errs


def validate_graph(g: ComputationalGraph) -> list[str]:
    """Every invariant violation of ``g``; an empty list means valid."""
    errs = validate_structure(g)
    if errs:
        return errs
    for nd in g.nodes:
        errs.extend(_check_dims(nd))
    if errs:
        return errs
    batches = {nd.dims.n for nd in g.nodes}
    if len(batches) > 1:
        errs.append(f"inconsistent batch sizes {sorted(batches)}")
    byid = {nd.id: nd for nd in g.nodes}
    for nd in g.nodes:
        preds = g.predecessors(nd.id)
        if not preds:
            continue
        d = nd.dims
        pdims = [byid[p].dims for p in preds]
        if nd.kind is LayerKind.CONCAT:
            for p, pd in zip(preds, pdims):
                if (pd.oh, pd.ow) != (d.ih, d.iw):
                    errs.append(f"edge ({p},{nd.id}): concat branch spatial {pd.oh}x{pd.ow} != {d.ih}x{d.iw}")
            if sum(pd.oc for pd in pdims) != d.ic:
                errs.append(f"node {nd.id}: concat ic={d.ic} != sum of branch channels")
        elif nd.kind is LayerKind.ADD:
            for p, pd in zip(preds, pdims):
                if pd.out_shape != d.in_shape:
                    errs.append(f"edge ({p},{nd.id}): add operand {pd.out_shape} != {d.in_shape}")
        else:
            pd = pdims[0]
            if pd.out_volume != d.in_volume:
                errs.append(f"edge ({preds[0]},{nd.id}): volume {pd.out_volume} != {d.in_volume}")
            elif nd.kind is not LayerKind.FC and pd.out_shape != d.in_shape:
                errs.append(f"edge ({preds[0]},{nd.id}): shape {pd.out_shape} != {d.in_shape}")
    return errs


class GraphFormatError(ValueError):
    pass


def graph_to_dict(g: ComputationalGraph) -> dict:
    nodes = []
    for nd in g.nodes:
        nodes.append({
            "id": nd.id,
            "kind": nd.kind.value,
            "dims": None if nd.dims is None else nd.dims.to_dict(),
        })
    pos = g.position()
    edges = sorted(([a, b] for a, b in g.edges), key=lambda e: (pos[e[0]], pos[e[1]]))
    return {"nodes": nodes, "edges": edges}


def graph_from_dict(doc: dict) -> ComputationalGraph:
    if not isinstance(doc, dict):
        raise GraphFormatError("graph document must be an object")
    extra = set(doc) - {"nodes", "edges"}
    if extra:
        raise GraphFormatError(f"unknown fields {sorted(extra)}")
    nodes = []
    for raw in doc.get("nodes", []):
        extra = set(raw) - {"id", "kind", "dims"}
        if extra:
            raise GraphFormatError(f"unknown node fields {sorted(extra)}")
        try:
            kind = LayerKind(raw["kind"])
        except (KeyError, ValueError) as exc:
            raise GraphFormatError(f"bad layer kind in {raw!r}") from exc
        dims = raw.get("dims")
        if dims is not None:
            extra = set(dims) - set(DIM_FIELDS)
            if extra:
                raise GraphFormatError(f"unknown dims fields {sorted(extra)}")
            missing = set(DIM_FIELDS) - set(dims)
            if missing:
                raise GraphFormatError(f"missing dims fields {sorted(missing)}")
            dims = DimensionSpec(**{k: int(dims[k]) for k in DIM_FIELDS})
        nodes.append(LayerNode(int(raw["id"]), kind, dims))
    edges = []
    for e in doc.get("edges", []):
        if len(e) != 2:
            raise GraphFormatError(f"bad edge {e!r}")
        edges.append((int(e[0]), int(e[1])))
    return ComputationalGraph(tuple(nodes), frozenset(edges))


def dumps_graph(g: ComputationalGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=1, sort_keys=True) + "\n"


def loads_graph(text: str) -> ComputationalGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(str(exc)) from exc
    return graph_from_dict(doc)


def save_graph(g: ComputationalGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(g))


def load_graph(path: str | Path) -> ComputationalGraph:
    return loads_graph(Path(path).read_text())


def chain(kinds_dims: Iterable[tuple[LayerKind, DimensionSpec | None]]) -> ComputationalGraph:
    """Build a linear graph; handy in tests and reference builders."""
    nodes = [LayerNode(i, k, d) for i, (k, d) in enumerate(kinds_dims)]
    edges = {(i, i + 1) for i in range(len(nodes) - 1)}
    return ComputationalGraph(tuple(nodes), frozenset(edges))
