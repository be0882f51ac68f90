"""Layer input/output volume estimation and dimension-space search."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import RawIndex
from .graph import ComputationalGraph, DimensionSpec, LayerKind, LayerNode, conv_out
from .topology import TopologyGraph
from .tracesim import TraceBundle

K = LayerKind
PASSTHROUGH = (K.BN, K.RELU)

# Source tags, strongest first.
SOURCES = ("pcie", "relu_anchor", "add_anchor", "fc_readvolume", "write_volume", "propagated")
_PRIORITY = {"pcie": 0, "relu_anchor": 1, "add_anchor": 1, "fc_readvolume": 2, "write_volume": 3}


@dataclass(frozen=True)
class SearchConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    kernels: tuple[int, ...] = (1, 3, 5, 7)
    strides: tuple[int, ...] = (1, 2)
    paddings: tuple[int, ...] = (0, 1, 2, 3)
    pool_kernels: tuple[int, ...] = (2, 3)
    pool_strides: tuple[int, ...] = (1, 2)
    pool_paddings: tuple[int, ...] = (0, 1)
    global_pool: bool = True
    tolerance: float = 0.02
    noise: float = 0.0
    slack_lines: int = 1
    relu_missrate: float = 0.98
    add_missrate: float = 0.98
    fc_relu_anchor_weight: float = 0.5
    use_weight_volume: bool = True
    # Profiled latency model: overhead + factor * ops * per_op + bytes * per_byte, jittered.
    use_latency: bool = True
    lat_overhead: float = 2000.0
    lat_per_op: float = 1.0 / 256
    lat_per_byte: float = 1.0 / 16
    lat_factor_range: tuple[float, float] = (0.7, 1.6)
    lat_band: float = 0.25
    cluster_gap_lines: int = 8
    max_candidates: int = 512

    @property
    def rel_tol(self) -> float:
        return self.tolerance + self.noise

    @property
    def weight_slack_lines(self) -> int:
        return self.slack_lines + (2 if self.noise > 0 else 0)


# ------------------------------------------------------------ observations


@dataclass
class LayerObservation:
    kernels: list[int]
    read_lines: int
    write_lines: int
    out_span: int | None  # lines of the output buffer of the layer's last kernel
    private_spans: list[int]  # read-only lines read by this layer only, per address cluster
    last_latency: float = 0.0
    last_bus_bytes: int = 0


def _spans(lines: np.ndarray, gap: int) -> list[int]:
    if not len(lines):
        return []
    lines = np.unique(lines)
    cuts = np.flatnonzero(np.diff(lines) > gap) + 1
    return [int(c[-1] - c[0] + 1) for c in np.split(lines, cuts)]


def observe(t: TraceBundle, assignment: np.ndarray, n_layers: int, cfg: SearchConfig = SearchConfig(),
            index: RawIndex | None = None) -> list[LayerObservation]:
    index = index or RawIndex(t)
    ls = t.line_size
    assignment = np.asarray(assignment, dtype=np.int64)
    gap = cfg.cluster_gap_lines
    all_w = [k.write_addresses for k in t.kernels]
    written = np.unique(np.concatenate(all_w)) if all_w else np.empty(0, np.uint64)
    read_layer = assignment[index.read_kernel] if len(index.read_kernel) else np.empty(0, np.int64)
    ro = ~np.isin(index.read_addr, written)
    # Reads of a dropped write sit inside a written buffer; they are not read-only data.
    wl = (written // np.uint64(ls)).astype(np.int64)
    if len(wl):
        cuts = np.flatnonzero(np.diff(wl) > gap) + 1
        lo_b = np.concatenate([[wl[0]], wl[cuts]])
        hi_b = np.concatenate([wl[cuts - 1], [wl[-1]]])
        rl_all = (index.read_addr // np.uint64(ls)).astype(np.int64)
        j = np.searchsorted(lo_b, rl_all, side="right") - 1
        inside = (j >= 0) & (rl_all <= hi_b[np.maximum(j, 0)])
        ro &= ~inside
    ro_lines = (index.read_addr[ro] // np.uint64(ls)).astype(np.int64)
    ro_layer = read_layer[ro]
    pairs = np.unique(np.stack([ro_lines, ro_layer], axis=1), axis=0) if len(ro_lines) else np.empty((0, 2), np.int64)
    line_ids, counts = np.unique(pairs[:, 0], return_counts=True)
    private = pairs[np.isin(pairs[:, 0], line_ids[counts == 1])]
    # RAW reads by other layers, keyed by writer kernel.
    raw = index.writer >= 0
    raw &= read_layer != assignment[np.maximum(index.writer, 0)]
    raw_writer = index.writer[raw]
    raw_lines = (index.read_addr[raw] // np.uint64(ls)).astype(np.int64)
    order = np.argsort(raw_writer, kind="stable")
    raw_writer, raw_lines = raw_writer[order], raw_lines[order]
    bounds = np.searchsorted(raw_writer, np.arange(len(t.kernels) + 1))
    priv_order = np.argsort(private[:, 1], kind="stable")
    private = private[priv_order]
    priv_bounds = np.searchsorted(private[:, 1], np.arange(n_layers + 1))

    obs = []
    for pos in range(n_layers):
        ks = np.flatnonzero(assignment == pos).tolist()
        if not ks:
            obs.append(LayerObservation([], 0, 0, None, []))
            continue
        rl = sum(t.kernels[k].n_reads for k in ks)
        wl = sum(t.kernels[k].n_writes for k in ks)
        last = ks[-1]
        w = np.unique(t.kernels[last].write_addresses // np.uint64(ls)).astype(np.int64)
        span = None
        if len(w):
            cuts = np.flatnonzero(np.diff(w) > gap) + 1
            clusters = np.split(w, cuts)
            consumed = raw_lines[bounds[last]:bounds[last + 1]]
            pick = None
            if len(consumed):
                probe = consumed[0]
                for c in clusters:
                    if c[0] <= probe <= c[-1]:
                        pick = c
                        break
            if pick is None:
                pick = max(clusters, key=len)
            span = int(pick[-1] - pick[0] + 1)
        priv = private[priv_bounds[pos]:priv_bounds[pos + 1], 0]
        kl = t.kernels[last]
        obs.append(LayerObservation(ks, rl, wl, span, _spans(priv, gap), float(kl.end - kl.start),
                                    len(kl.addresses) * ls))
    return obs


# --------------------------------------------------------- volume estimate


@dataclass
class IoSizeEstimate:
    """Per layer position: estimated input/output element counts (whole batch)."""

    I_est: list[float]
    O_est: list[float]
    source: list[str]
    batch: int
    batch_known: bool
    conflicts: list[str] = field(default_factory=list)
    observations: list[LayerObservation] = field(default_factory=list)

    def interval(self, pos: int, cfg: SearchConfig, elems_per_line: int) -> tuple[float, float]:
        v = self.O_est[pos]
        slack = cfg.slack_lines * elems_per_line
        return v * (1 - cfg.rel_tol) - slack, v * (1 + cfg.rel_tol) + slack


class _Groups:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def _preds(topo: TopologyGraph, i: int) -> list[int]:
    p = topo.predecessors(i)
    if not p and i > 0:
        return [i - 1]
    return p


def estimate_io(topo: TopologyGraph, t: TraceBundle, assignment: np.ndarray,
                cfg: SearchConfig = SearchConfig(), index: RawIndex | None = None) -> IoSizeEstimate:
    n = len(topo)
    if n == 0:
        raise ValueError("empty topology")
    es, ls = t.element_size, t.line_size
    q = ls / es
    obs = observe(t, assignment, n, cfg, index)
    img = int(np.prod(cfg.input_shape))
    h2d = t.h2d_bytes
    d2h = t.d2h_bytes
    batch, known = 1, False
    if h2d and (h2d // es) % img == 0 and h2d // es >= img:
        batch, known = h2d // es // img, True

    def close(a: float, b: float) -> bool:
        return abs(a - b) <= cfg.rel_tol * max(a, b) + cfg.slack_lines * q

    own: list[tuple[str, float] | None] = [None] * n
    for i, kind in enumerate(topo.kinds):
        o = obs[i]
        span_v = o.out_span * q if o.out_span else None
        if i == n - 1 and d2h:
            own[i] = ("pcie", d2h / es)
        elif kind is K.RELU and o.read_lines:
            v = o.read_lines * q / cfg.relu_missrate
            if span_v is not None and close(v, span_v):
                v = span_v
            succ = topo.successors(i)
            if span_v is not None and succ and topo.kinds[succ[0]] is K.FC:
                w = cfg.fc_relu_anchor_weight
                v = w * v + (1 - w) * span_v
            own[i] = ("relu_anchor", v)
        elif kind is K.ADD and o.read_lines:
            v = o.read_lines * q / cfg.add_missrate / max(1, len(_preds(topo, i)))
            if span_v is not None and close(v, span_v):
                v = span_v
            own[i] = ("add_anchor", v)
        elif span_v is not None:
            own[i] = ("write_volume", span_v)

    groups = _Groups(n)
    for i, kind in enumerate(topo.kinds):
        if kind in PASSTHROUGH or kind is K.ADD:
            for p in _preds(topo, i):
                groups.union(i, p)

    def resolve() -> dict[int, tuple[str, float]]:
        best: dict[int, tuple[str, float]] = {}
        for i in range(n):
            if own[i] is None:
                continue
            r = groups.find(i)
            if r not in best or _PRIORITY[own[i][0]] < _PRIORITY[best[r][0]]:
                best[r] = own[i]
        return best

    best = resolve()
    # FC output from its weight read volume, when its group has nothing stronger.
    for i, kind in enumerate(topo.kinds):
        if kind is not K.FC:
            continue
        r = groups.find(i)
        if r in best and _PRIORITY[best[r][0]] <= _PRIORITY["fc_readvolume"]:
            continue
        preds = _preds(topo, i)
        in_v = sum(best[groups.find(p)][1] for p in preds if groups.find(p) in best) if preds else None
        wspan = max(obs[i].private_spans, default=0) * q
        if in_v and wspan:
            # weights hold IC*OC elements and IC = in_v / batch
            own[i] = ("fc_readvolume", batch * wspan / (in_v / batch))
    best = resolve()

    conflicts = []
    for i in range(n):
        if own[i] is None or own[i][0] == "write_volume":
            continue
        b = best.get(groups.find(i))
        if b and b[0] != "write_volume" and not close(own[i][1], b[1]):
            conflicts.append(f"position {i}: {own[i][0]} estimate {own[i][1]:.0f} "
                             f"disagrees with {b[0]} estimate {b[1]:.0f}")

    O, src = [], []
    for i in range(n):
        b = best.get(groups.find(i))
        if b is None:
            O.append(float(batch))
            src.append("propagated")
            conflicts.append(f"position {i}: no volume evidence")
            continue
        O.append(float(b[1]))
        src.append(b[0] if own[i] is not None and own[i][0] == b[0] and own[i][1] == b[1] else "propagated")
    I = [float(h2d / es) if h2d else O[0]]
    I += [float(sum(O[p] for p in _preds(topo, i))) for i in range(1, n)]
    return IoSizeEstimate(I, O, src, batch, known, conflicts, obs)


# -------------------------------------------------------- dimension search


Shape = tuple[int, int, int]


@dataclass(frozen=True)
class Candidate:
    spec: DimensionSpec
    inputs: tuple[Shape, ...]  # output shape required from each predecessor
    weight_err: int = 0  # lines between the implied weight volume and the observed one

    @property
    def out_shape(self) -> Shape:
        return self.spec.out_shape

    def rank_key(self) -> tuple:
        d = self.spec
        preserve = 0 if (d.oh, d.ow) == (d.ih, d.iw) else 1
        return (self.weight_err, d.k, d.s, preserve, d.p, d.oc)


@dataclass
class LayerSolution:
    kind: LayerKind
    candidates: list[Candidate]
    ties: bool = False

    @property
    def exact(self) -> bool:
        return len(self.candidates) == 1

    @property
    def specs(self) -> list[DimensionSpec]:
        return [c.spec for c in self.candidates]


@dataclass
class DimensionEstimate:
    layers: list[LayerSolution]
    io: IoSizeEstimate
    top: list[DimensionSpec] | None
    unsat: list[str] = field(default_factory=list)
    topology: TopologyGraph | None = None

    @property
    def solved(self) -> bool:
        return not self.unsat and self.top is not None

    def to_graph(self) -> ComputationalGraph:
        """Completed graph for the top-ranked consistent solution."""
        if self.topology is None or self.top is None:
            raise ValueError("no complete solution to emit")
        nodes = tuple(LayerNode(i, k, d) for i, (k, d) in enumerate(zip(self.topology.kinds, self.top)))
        return ComputationalGraph(nodes, self.topology.edges)

    def report(self) -> str:
        """Tab-separated per-layer report with conflicts and unsat notes as comments."""
        lines = ["#dims v1",
                 f"#batch\t{self.io.batch}\t{'pcie' if self.io.batch_known else 'assumed'}"]
        lines += [f"#conflict\t{c}" for c in self.io.conflicts]
        lines += [f"#unsat\t{u}" for u in self.unsat]
        lines.append("position\tkind\tsource\ti_est\to_est\tn_candidates\texact\tties\ttop\tcandidates")
        for i, sol in enumerate(self.layers):
            top = _fmt(self.top[i]) if self.top else "-"
            cands = ";".join(_fmt(c.spec) for c in sol.candidates[:32])
            if len(sol.candidates) > 32:
                cands += f";...+{len(sol.candidates) - 32}"
            lines.append("\t".join([
                str(i), sol.kind.value, self.io.source[i], f"{self.io.I_est[i]:.0f}",
                f"{self.io.O_est[i]:.0f}", str(len(sol.candidates)), str(int(sol.exact)),
                str(int(sol.ties)), top, cands or "-"]))
        return "\n".join(lines) + "\n"


def _fmt(d: DimensionSpec) -> str:
    return (f"{d.ic}x{d.ih}x{d.iw}->{d.oc}x{d.oh}x{d.ow}"
            f"/k{d.k}p{d.p}s{d.s}")


def _weight_sets(spans: list[int], limit: int = 6) -> list[int]:
    spans = sorted(spans, reverse=True)[:limit]
    sums = set()
    for r in range(1, len(spans) + 1):
        for combo in itertools.combinations(spans, r):
            sums.add(sum(combo))
    return sorted(sums)


def _weight_err(volume: int, sums: list[int], es: int, ls: int, slack: int) -> int | None:
    """Distance in lines to the nearest observed weight run sum; None when beyond slack."""
    if not sums:
        return 0
    lines = -(-volume * es // ls)
    err = min(abs(lines - s) for s in sums)
    return err if err <= slack else None


def _latency_ok(ops: float, ob: LayerObservation | None, cfg: SearchConfig) -> bool:
    """Whether a compute-bound kernel of ``ops`` operations could have produced the observed duration."""
    if not cfg.use_latency or ob is None or not ob.kernels:
        return True
    fixed = cfg.lat_overhead + cfg.lat_per_byte * ob.last_bus_bytes
    lo, hi = cfg.lat_factor_range
    pred_lo = fixed + lo * cfg.lat_per_op * ops
    pred_hi = fixed + hi * cfg.lat_per_op * ops
    return pred_lo * (1 - cfg.lat_band) <= ob.last_latency <= pred_hi * (1 + cfg.lat_band)


def _layer_candidates(kind: LayerKind, ins: Sequence[Shape], n: int, o_lo: float, o_hi: float,
                      wsums: list[int], cfg: SearchConfig, es: int, ls: int,
                      ob: LayerObservation | None = None) -> list[Candidate]:
    out: list[Candidate] = []
    wslack = cfg.weight_slack_lines

    def fits(vol: int) -> bool:
        return o_lo <= n * vol <= o_hi

    def oc_range(area: int) -> range:
        lo = max(1, math.ceil(o_lo / (n * area)))
        hi = math.floor(o_hi / (n * area))
        return range(lo, hi + 1)

    if kind is K.CONV:
        c, h, w = ins[0]
        for k, s, p in itertools.product(cfg.kernels, cfg.strides, cfg.paddings):
            oh, ow = conv_out(h, k, p, s), conv_out(w, k, p, s)
            if oh < 1 or ow < 1:
                continue
            for oc in oc_range(oh * ow):
                err = _weight_err(k * k * c * oc, wsums, es, ls, wslack) if cfg.use_weight_volume else 0
                if err is None or not _latency_ok(2.0 * n * oc * oh * ow * k * k * c, ob, cfg):
                    continue
                out.append(Candidate(DimensionSpec(n, c, h, w, oc, oh, ow, k, p, s), tuple(ins), err))
    elif kind is K.POOL:
        c, h, w = ins[0]
        opts = set(itertools.product(cfg.pool_kernels, cfg.pool_strides, cfg.pool_paddings))
        if cfg.global_pool and h == w:
            opts.add((h, 1, 0))
        for k, s, p in sorted(opts):
            if 2 * p > k:
                continue
            oh, ow = conv_out(h, k, p, s), conv_out(w, k, p, s)
            if oh >= 1 and ow >= 1 and fits(c * oh * ow):
                out.append(Candidate(DimensionSpec(n, c, h, w, c, oh, ow, k, p, s), tuple(ins)))
    elif kind is K.FC:
        c, h, w = ins[0]
        ic = c * h * w
        for oc in oc_range(1):
            err = _weight_err(ic * oc, wsums, es, ls, wslack) if cfg.use_weight_volume else 0
            if err is None:
                continue
            out.append(Candidate(DimensionSpec(n, ic, 1, 1, oc, 1, 1), tuple(ins), err))
    elif kind in PASSTHROUGH or kind is K.ADD:
        if len(set(ins)) == 1:
            c, h, w = ins[0]
            # BN reads four parameters per channel
            err = _weight_err(4 * c, wsums, es, ls, wslack) if kind is K.BN and cfg.use_weight_volume else 0
            if fits(c * h * w) and err is not None:
                out.append(Candidate(DimensionSpec(n, c, h, w, c, h, w), tuple(ins), err))
    elif kind is K.CONCAT:
        if len({(h, w) for _, h, w in ins}) == 1:
            ctot = sum(c for c, _, _ in ins)
            _, h, w = ins[0]
            if fits(ctot * h * w):
                out.append(Candidate(DimensionSpec(n, ctot, h, w, ctot, h, w), tuple(ins)))
    return out


def _input_options(kind: LayerKind, pred_sets: list[set[Shape]], limit: int) -> list[tuple[Shape, ...]]:
    if not pred_sets:
        return []
    if kind is K.ADD or (kind is not K.CONCAT and len(pred_sets) > 1):
        common = set.intersection(*pred_sets)
        return [tuple([s] * len(pred_sets)) for s in sorted(common)]
    if kind is K.CONCAT:
        combos = []
        for combo in itertools.product(*[sorted(s) for s in pred_sets]):
            combos.append(combo)
            if len(combos) >= limit:
                break
        return combos
    return [(s,) for s in sorted(pred_sets[0])]


def solve_dims(topo: TopologyGraph, io: IoSizeEstimate, cfg: SearchConfig = SearchConfig(),
               element_size: int = 4, line_size: int = 32) -> DimensionEstimate:
    n_layers = len(topo)
    n = io.batch
    q = line_size / element_size
    preds = [_preds(topo, i) for i in range(n_layers)]
    succs: list[list[int]] = [[] for _ in range(n_layers)]
    for i, ps in enumerate(preds):
        for p in ps:
            succs[p].append(i)
    wsums = [_weight_sets(o.private_spans) if o.kernels else [] for o in io.observations]
    if not io.observations:
        wsums = [[] for _ in range(n_layers)]
    cands: list[list[Candidate]] = []
    unsat: list[str] = []
    image = tuple(cfg.input_shape)
    for i, kind in enumerate(topo.kinds):
        if i == 0:
            options = [(image,)]
        else:
            options = _input_options(kind, [{c.out_shape for c in cands[p]} for p in preds[i]],
                                     cfg.max_candidates)
        lo, hi = io.interval(i, cfg, q)
        layer: list[Candidate] = []
        for ins in options:
            layer.extend(_layer_candidates(kind, ins, n, lo, hi, wsums[i], cfg, element_size, line_size,
                                           io.observations[i] if io.observations else None))
        if len(layer) > cfg.max_candidates:
            layer.sort(key=Candidate.rank_key)
            layer = layer[:cfg.max_candidates]
        if not layer:
            unsat.append(f"position {i} ({kind.value}): no candidate matches output volume "
                         f"[{lo:.0f}, {hi:.0f}] given {len(options)} input shape option(s)")
        cands.append(layer)

    # Arc consistency: drop candidates no consumer can use, and consumers whose inputs vanished.
    changed = True
    while changed and not unsat:
        changed = False
        for i in range(n_layers - 1, -1, -1):
            wanted = [{sc.inputs[preds[s].index(i)] for sc in cands[s]} for s in succs[i]]
            keep = [c for c in cands[i] if all(c.out_shape in w for w in wanted)]
            if len(keep) != len(cands[i]):
                cands[i], changed = keep, True
        for i in range(1, n_layers):
            outs = [{c.out_shape for c in cands[p]} for p in preds[i]]
            keep = [c for c in cands[i] if all(c.inputs[j] in outs[j] for j in range(len(outs)))]
            if len(keep) != len(cands[i]):
                cands[i], changed = keep, True
        for i, c in enumerate(cands):
            if not c:
                unsat.append(f"position {i} ({topo.kinds[i].value}): candidates eliminated by neighbor constraints")

    layers = []
    for i, cs in enumerate(cands):
        cs = sorted(cs, key=Candidate.rank_key)
        ties = len(cs) > 1 and cs[0].rank_key() == cs[1].rank_key()
        layers.append(LayerSolution(topo.kinds[i], cs, ties))
    top = None if unsat else _select(layers, preds)
    if top is None and not unsat:
        unsat.append("no globally consistent assignment of candidates")
    est = DimensionEstimate(layers, io, top, unsat, topo)
    for sol in layers:
        for c in sol.candidates:
            d = c.spec
            if sol.kind in (K.CONV, K.POOL):
                assert d.oh == conv_out(d.ih, d.k, d.p, d.s) and d.ow == conv_out(d.iw, d.k, d.p, d.s)
    return est


def _select(layers: list[LayerSolution], preds: list[list[int]]) -> list[DimensionSpec] | None:
    """Best-ranked candidate per layer, consistent with chosen predecessors (DFS with backtracking)."""
    n = len(layers)
    chosen: list[Candidate | None] = [None] * n
    choice_idx = [0] * n
    i = 0
    steps = 0
    while 0 <= i < n:
        steps += 1
        if steps > 200000:
            return None
        cs = layers[i].candidates
        found = False
        while choice_idx[i] < len(cs):
            c = cs[choice_idx[i]]
            choice_idx[i] += 1
            if all(chosen[p] is not None and chosen[p].out_shape == c.inputs[j]
                   for j, p in enumerate(preds[i])):
                chosen[i] = c
                found = True
                break
        if found:
            i += 1
            if i < n:
                choice_idx[i] = 0
        else:
            chosen[i] = None
            i -= 1
    if i < 0:
        return None
    return [c.spec for c in chosen]


def estimate_dimensions(topo: TopologyGraph, t: TraceBundle, assignment: np.ndarray,
                        cfg: SearchConfig = SearchConfig(), index: RawIndex | None = None) -> DimensionEstimate:
    io = estimate_io(topo, t, assignment, cfg, index)
    return solve_dims(topo, io, cfg, t.element_size, t.line_size)
