"""Synthetic bus-level trace generation.

Stands in for a bus snooper on a GPU: a computational graph is lowered to a
sequence of kernel events, each carrying the cache-line memory requests that
reach device memory, plus the PCIe copy sizes before and after inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .graph import ComputationalGraph, LayerKind

K = LayerKind

WEIGHT_BASE = 0x1_0000_0000
WORKSPACE_BASE = 0x8_0000_0000
SCRATCH_BASE = 0xC_0000_0000


@dataclass(frozen=True)
class ConvAlgo:
    name: str
    kernels: int
    workspace: float  # extra read/write traffic as a fraction of the kernel's own lines
    latency: float


CONV_ALGOS: tuple[ConvAlgo, ...] = (
    ConvAlgo("implicit_gemm", 1, 0.00, 1.0),
    ConvAlgo("implicit_precomp_gemm", 2, 0.05, 0.9),
    ConvAlgo("gemm", 2, 0.10, 1.15),
    ConvAlgo("direct", 1, 0.00, 1.6),
    ConvAlgo("fft", 3, 0.15, 1.25),
    ConvAlgo("winograd", 3, 0.08, 0.7),
    ConvAlgo("winograd_nonfused", 4, 0.12, 0.8),
)


@dataclass(frozen=True)
class SimConfig:
    line_size: int = 32
    element_size: int = 4
    cache_model: str = "reuse"  # "reuse" (distance threshold) or "lru" (capacity model)
    cache_capacity_lines: int = 49152
    reuse_threshold_kernels: int = 3
    weight_cache_priority: bool = True
    conv_algo_count: int = 7
    kernels_per_conv_range: tuple[int, int] = (1, 4)
    latency_per_op: float = 1.0 / 256
    latency_per_byte: float = 1.0 / 16
    launch_overhead: int = 2000
    kernel_gap: int = 100
    jitter: float = 0.05
    relu_add_missrate: float = 0.98
    concat_missrate: float = 0.55
    default_missrate: float = 0.35
    far_missrate: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "kernels_per_conv_range", tuple(self.kernels_per_conv_range))
        for name in ("relu_add_missrate", "concat_missrate", "default_missrate", "far_missrate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        if self.line_size < 1 or self.line_size % self.element_size:
            raise ValueError("line_size must be a positive multiple of element_size")
        if not 1 <= self.conv_algo_count <= len(CONV_ALGOS):
            raise ValueError(f"conv_algo_count must be in [1,{len(CONV_ALGOS)}]")
        if self.cache_model not in ("reuse", "lru"):
            raise ValueError(f"unknown cache_model {self.cache_model!r}")

    @property
    def reuse_threshold(self) -> int:
        # weight-priority caching evicts feature maps sooner
        return self.reuse_threshold_kernels if self.weight_cache_priority else 4 * self.reuse_threshold_kernels


@dataclass(frozen=True)
class MemoryRequest:
    address: int
    kind: str  # "R" or "W"
    timestamp: int
    kernel_index: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class KernelEvent:
    index: int
    start: int
    end: int
    layer_id: int
    addresses: np.ndarray  # uint64, line aligned
    is_write: np.ndarray  # bool
    _timestamps: np.ndarray | None = field(default=None, repr=False)

    @property
    def read_addresses(self) -> np.ndarray:
        return self.addresses[~self.is_write]

    @property
    def write_addresses(self) -> np.ndarray:
        return self.addresses[self.is_write]

    @property
    def n_reads(self) -> int:
        return int(len(self.is_write) - np.count_nonzero(self.is_write))

    @property
    def n_writes(self) -> int:
        return int(np.count_nonzero(self.is_write))

    @property
    def timestamps(self) -> np.ndarray:
        if self._timestamps is not None:
            return self._timestamps
        n = len(self.addresses)
        span = self.end - self.start
        return self.start + (np.arange(1, n + 1, dtype=np.int64) * span) // (n + 1)

    def requests(self) -> Iterator[MemoryRequest]:
        ts = self.timestamps
        for a, w, t in zip(self.addresses.tolist(), self.is_write.tolist(), ts.tolist()):
            yield MemoryRequest(a, "W" if w else "R", t, self.index)


@dataclass(frozen=True)
class PcieRecord:
    direction: str  # "h2d" | "d2h"
    bytes: int
    position: str  # "before_first_kernel" | "after_last_kernel"


@dataclass(frozen=True)
class Region:
    start: int
    end: int  # exclusive byte address
    tag: str  # feature | weight | input | workspace | scratch
    layer_id: int


@dataclass(frozen=True)
class SimTruth:
    """Ground truth held out from extraction; written only to the sidecar file."""

    kernel_layer: tuple[int, ...]
    layer_kinds: dict[int, str]
    regions: tuple[Region, ...] = ()
    conv_algos: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class TraceBundle:
    kernels: tuple[KernelEvent, ...]
    pcie: tuple[PcieRecord, ...]
    line_size: int = 32
    element_size: int = 4
    truth: SimTruth | None = None

    def pcie_bytes(self, direction: str) -> int | None:
        for r in self.pcie:
            if r.direction == direction:
                return r.bytes
        return None

    @property
    def h2d_bytes(self) -> int | None:
        return self.pcie_bytes("h2d")

    @property
    def d2h_bytes(self) -> int | None:
        return self.pcie_bytes("d2h")

    def without_truth(self) -> "TraceBundle":
        return replace(self, truth=None,
                       kernels=tuple(replace(k, layer_id=-1) for k in self.kernels))

    def n_requests(self) -> int:
        return sum(len(k.addresses) for k in self.kernels)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class _Tensor:
    line0: int  # first line index within its region
    nlines: int
    base: int
    tag: str
    layer_id: int
    line_size: int
    last_kernel: int = -1

    def addr(self, lines: np.ndarray) -> np.ndarray:
        lines = np.asarray(lines, dtype=np.uint64)
        return np.uint64(self.base) + (np.uint64(self.line0) + lines) * np.uint64(self.line_size)


class _Allocator:
    """Bump allocator over one address region with a one-line guard gap."""

    def __init__(self, base: int, line_size: int, regions: list[Region]):
        self.base = base
        self.line_size = line_size
        self.next_line = 0
        self.regions = regions

    def alloc(self, elements: int, elem_size: int, tag: str, layer_id: int) -> _Tensor:
        nbytes = max(1, elements) * elem_size
        nlines = -(-nbytes // self.line_size)
        t = _Tensor(self.next_line, nlines, self.base, tag, layer_id, self.line_size)
        start = self.base + self.next_line * self.line_size
        self.regions.append(Region(start, start + nlines * self.line_size, tag, layer_id))
        self.next_line += nlines + 1
        return t


def _weight_elements(kind: LayerKind, d) -> int:
    if kind is K.CONV:
        return d.k * d.k * d.ic * d.oc
    if kind is K.FC:
        return d.ic * d.oc
    if kind is K.BN:
        return 4 * d.oc
    return 0


def _compute_ops(kind: LayerKind, d) -> float:
    out = d.n * d.out_volume
    if kind is K.CONV:
        return 2.0 * out * d.k * d.k * d.ic
    if kind is K.FC:
        return 2.0 * d.n * d.ic * d.oc
    if kind is K.POOL:
        return float(out * d.k * d.k)
    if kind is K.BN:
        return 4.0 * out
    return float(out)


def simulate(g: ComputationalGraph, cfg: SimConfig | None = None, seed: int = 0) -> TraceBundle:
    """Lower ``g`` to a kernel/memory-request trace; deterministic in ``seed``."""
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)
    ls, es = cfg.line_size, cfg.element_size
    regions: list[Region] = []
    weights_alloc = _Allocator(WEIGHT_BASE, ls, regions)
    # weights for every layer are resident before inference starts
    weights: dict[int, _Tensor] = {}
    for nd in g.nodes:
        wel = _weight_elements(nd.kind, nd.dims)
        if wel:
            weights[nd.id] = weights_alloc.alloc(wel, es, "weight", nd.id)
    # input image follows the weights; feature maps follow the input
    act = _Allocator(WEIGHT_BASE + (weights_alloc.next_line + 64) * ls, ls, regions)
    first = g.nodes[0].dims
    image = act.alloc(first.n * first.in_volume, es, "input", -1)
    workspace = _Tensor(0, 0, WORKSPACE_BASE, "workspace", -1, ls)
    scratch = _Tensor(0, 0, SCRATCH_BASE, "scratch", -1, ls)
    ws_max = [0, 0]

    outputs: dict[int, _Tensor] = {}
    kernels: list[KernelEvent] = []
    kernel_layer: list[int] = []
    conv_algos: dict[int, str] = {}
    traffic: list[int] = []  # bus lines per kernel, for the capacity model
    clock = 0
    preds = {nd.id: g.predecessors(nd.id) for nd in g.nodes}
    lo_k, hi_k = cfg.kernels_per_conv_range

    def missrate(consumer_kind: LayerKind, tensor: _Tensor, kidx: int) -> float:
        if tensor.tag == "input":
            return cfg.far_missrate
        if consumer_kind in (K.RELU, K.ADD):
            return cfg.relu_add_missrate
        if consumer_kind is K.CONCAT:
            return cfg.concat_missrate
        if cfg.cache_model == "reuse":
            dist = kidx - tensor.last_kernel
            return cfg.far_missrate if dist > cfg.reuse_threshold else cfg.default_missrate
        between = sum(traffic[tensor.last_kernel + 1:kidx])
        survive = min(1.0, max(0, cfg.cache_capacity_lines - between) / max(1, tensor.nlines))
        return cfg.default_missrate + (cfg.far_missrate - cfg.default_missrate) * (1.0 - survive)

    def sample_lines(t: _Tensor, rate: float) -> np.ndarray:
        m = min(t.nlines, max(1, math.ceil(rate * t.nlines - 1e-9)))
        if m == t.nlines:
            lines = np.arange(t.nlines, dtype=np.int64)
        else:
            lines = np.sort(rng.choice(t.nlines, size=m, replace=False))
        return t.addr(lines)

    def emit_kernel(layer_id, reads: list[np.ndarray], writes: list[np.ndarray], ops: float,
                    lat_factor: float, ws_frac: float) -> int:
        nonlocal clock
        kidx = len(kernels)
        r = np.concatenate(reads) if reads else np.empty(0, np.uint64)
        w = np.concatenate(writes) if writes else np.empty(0, np.uint64)
        if ws_frac > 0:
            extra = int(round(ws_frac * (len(r) + len(w))))
            if extra:
                r = np.concatenate([r, workspace.addr(np.arange(extra))])
                w = np.concatenate([w, scratch.addr(np.arange(extra))])
                ws_max[0] = max(ws_max[0], extra)
        addrs = np.concatenate([r, w]).astype(np.uint64)
        is_w = np.zeros(len(addrs), dtype=bool)
        is_w[len(r):] = True
        bus_bytes = len(addrs) * ls
        lat = cfg.launch_overhead + lat_factor * cfg.latency_per_op * ops + cfg.latency_per_byte * bus_bytes
        lat *= max(0.2, 1.0 + cfg.jitter * rng.standard_normal())
        start = clock + cfg.kernel_gap
        end = start + max(1, int(round(lat)))
        clock = end
        kernels.append(KernelEvent(kidx, start, end, layer_id, _frozen(addrs), _frozen(is_w)))
        kernel_layer.append(layer_id)
        traffic.append(len(addrs))
        return kidx

    for nd in g.nodes:
        d = nd.dims
        kind = nd.kind
        ins = [outputs[p] for p in preds[nd.id]] or [image]
        out = act.alloc(d.n * d.out_volume, es, "feature", nd.id)
        ops = _compute_ops(kind, d)
        kidx0 = len(kernels)
        in_reads = [sample_lines(t, missrate(kind, t, kidx0)) for t in ins]
        wt = weights.get(nd.id)
        w_reads = [wt.addr(np.arange(wt.nlines))] if wt is not None else []
        out_writes = [out.addr(np.arange(out.nlines))]
        if kind is K.CONV:
            algo = CONV_ALGOS[int(rng.integers(cfg.conv_algo_count))]
            conv_algos[nd.id] = algo.name
            nk = int(min(max(algo.kernels, lo_k), hi_k))
            if nk == 1:
                last = emit_kernel(nd.id, in_reads + w_reads, out_writes, ops, algo.latency, algo.workspace)
            else:
                inter_elems = d.n * max(d.in_volume, d.out_volume)
                prev = None
                for j in range(nk):
                    reads = in_reads if j == 0 else [sample_lines(prev, cfg.default_missrate)]
                    if j == nk - 1:
                        last = emit_kernel(nd.id, reads + w_reads, out_writes, ops,
                                           algo.latency, algo.workspace)
                    else:
                        # layout/transform passes are memory bound, like elementwise layers
                        buf = act.alloc(inter_elems, es, "feature", nd.id)
                        k = emit_kernel(nd.id, reads, [buf.addr(np.arange(buf.nlines))],
                                        float(inter_elems), 1.0, algo.workspace)
                        buf.last_kernel = k
                        prev = buf
        else:
            last = emit_kernel(nd.id, in_reads + w_reads, out_writes, ops, 1.0, 0.0)
        out.last_kernel = last
        outputs[nd.id] = out

    if ws_max[0]:
        regions.append(Region(WORKSPACE_BASE, WORKSPACE_BASE + ws_max[0] * ls, "workspace", -1))
        regions.append(Region(SCRATCH_BASE, SCRATCH_BASE + ws_max[0] * ls, "scratch", -1))
    pcie = (
        PcieRecord("h2d", g.input_size * es, "before_first_kernel"),
        PcieRecord("d2h", g.output_size * es, "after_last_kernel"),
    )
    truth = SimTruth(tuple(kernel_layer), {nd.id: nd.kind.value for nd in g.nodes}, tuple(regions), conv_algos)
    return TraceBundle(tuple(kernels), pcie, ls, es, truth)


def inject_noise(t: TraceBundle, pct: float, seed: int = 0) -> TraceBundle:
    """Scale each kernel's read and write volumes by factors uniform in [1-pct, 1+pct].

    Requests are dropped or duplicated; surviving requests keep their
    addresses and ground-truth labels are untouched.
    """
    if not 0.0 <= pct <= 1.0:
        raise ValueError("pct must lie in [0,1]")
    if pct == 0.0:
        return t
    rng = np.random.default_rng(seed)
    out = []
    for k in t.kernels:
        parts_a, parts_w = [], []
        for flag in (False, True):
            a = k.addresses[k.is_write == flag]
            n = len(a)
            f = rng.uniform(1.0 - pct, 1.0 + pct)
            lo, hi = math.ceil(n * (1.0 - pct) - 1e-9), math.floor(n * (1.0 + pct) + 1e-9)
            m = int(min(max(round(n * f), lo), hi))
            if m < n:
                keep = np.sort(rng.choice(n, size=m, replace=False))
                a = a[keep]
            elif m > n:
                dup = np.sort(rng.choice(n, size=m - n, replace=True))
                a = np.concatenate([a, a[dup]])
            parts_a.append(a)
            parts_w.append(np.full(len(a), flag))
        out.append(replace(k, addresses=_frozen(np.concatenate(parts_a).astype(np.uint64)),
                           is_write=_frozen(np.concatenate(parts_w)), _timestamps=None))
    return replace(t, kernels=tuple(out))


# ---------------------------------------------------------------------------
# text trace format


class TraceParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def dumps_trace(t: TraceBundle) -> str:
    parts = [f"#trace v1 line={t.line_size} elem={t.element_size}"]
    h2d = [r for r in t.pcie if r.position == "before_first_kernel"]
    d2h = [r for r in t.pcie if r.position != "before_first_kernel"]
    parts.extend(f"P {r.direction} {r.bytes}" for r in h2d)
    for k in t.kernels:
        parts.append(f"K {k.index} {k.start} {k.end}")
        kinds = np.where(k.is_write, "W", "R")
        idx = str(k.index)
        parts.extend(f"M {idx} {c} {a:x} {ts}" for c, a, ts in
                     zip(kinds.tolist(), k.addresses.tolist(), k.timestamps.tolist()))
    parts.extend(f"P {r.direction} {r.bytes}" for r in d2h)
    return "\n".join(parts) + "\n"


def write_trace(t: TraceBundle, path: str | Path) -> None:
    Path(path).write_text(dumps_trace(t))


def loads_trace(text: str) -> TraceBundle:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#trace v1"):
        raise TraceParseError("missing '#trace v1' header", 1)
    hdr = dict(tok.split("=", 1) for tok in lines[0].split()[2:] if "=" in tok)
    try:
        line_size = int(hdr["line"])
        elem = int(hdr["elem"])
    except (KeyError, ValueError):
        raise TraceParseError("header needs line=<bytes> elem=<bytes>", 1) from None
    pcie: list[PcieRecord] = []
    kheads: list[tuple[int, int, int]] = []
    req: dict[int, tuple[list, list, list]] = {}
    seen_kernel = False
    for no, ln in enumerate(lines[1:], start=2):
        if not ln or ln.startswith("#"):
            continue
        f = ln.split()
        tag = f[0]
        try:
            if tag == "M":
                if len(f) != 5 or f[2] not in ("R", "W"):
                    raise ValueError("expected 'M <kidx> <R|W> <hex addr> <ts>'")
                kidx = int(f[1])
                if kidx not in req:
                    raise ValueError(f"request for undeclared kernel {kidx}")
                a, w, ts = req[kidx]
                a.append(int(f[3], 16))
                w.append(f[2] == "W")
                ts.append(int(f[4]))
            elif tag == "K":
                if len(f) != 4:
                    raise ValueError("expected 'K <idx> <start> <end>'")
                idx, start, end = int(f[1]), int(f[2]), int(f[3])
                if idx != len(kheads):
                    raise ValueError(f"kernel index {idx} out of sequence")
                if end <= start:
                    raise ValueError("kernel end must exceed start")
                kheads.append((idx, start, end))
                req[idx] = ([], [], [])
                seen_kernel = True
            elif tag == "P":
                if len(f) != 3 or f[1] not in ("h2d", "d2h"):
                    raise ValueError("expected 'P <h2d|d2h> <bytes>'")
                pos = "after_last_kernel" if seen_kernel else "before_first_kernel"
                pcie.append(PcieRecord(f[1], int(f[2]), pos))
            else:
                raise ValueError(f"unknown record type {tag!r}")
        except ValueError as exc:
            raise TraceParseError(str(exc), no) from None
    kernels = []
    for idx, start, end in kheads:
        a, w, ts = req[idx]
        kernels.append(KernelEvent(idx, start, end, -1,
                                   _frozen(np.array(a, dtype=np.uint64)),
                                   _frozen(np.array(w, dtype=bool)),
                                   _frozen(np.array(ts, dtype=np.int64))))
    return TraceBundle(tuple(kernels), tuple(pcie), line_size, elem, None)


def read_trace(path: str | Path) -> TraceBundle:
    return loads_trace(Path(path).read_text())


def truth_to_dict(truth: SimTruth) -> dict:
    return {
        "kernel_layer": list(truth.kernel_layer),
        "layer_kinds": {str(k): v for k, v in truth.layer_kinds.items()},
        "conv_algos": {str(k): v for k, v in truth.conv_algos.items()},
        "regions": [[r.start, r.end, r.tag, r.layer_id] for r in truth.regions],
    }


def truth_from_dict(doc: dict) -> SimTruth:
    return SimTruth(
        tuple(int(x) for x in doc["kernel_layer"]),
        {int(k): v for k, v in doc["layer_kinds"].items()},
        tuple(Region(int(a), int(b), str(t), int(l)) for a, b, t, l in doc.get("regions", [])),
        {int(k): v for k, v in doc.get("conv_algos", {}).items()},
    )


def write_labels(truth: SimTruth, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth_to_dict(truth)) + "\n")


def read_labels(path: str | Path) -> SimTruth:
    return truth_from_dict(json.loads(Path(path).read_text()))


def attach_truth(t: TraceBundle, truth: SimTruth) -> TraceBundle:
    kernels = tuple(replace(k, layer_id=truth.kernel_layer[k.index]) for k in t.kernels)
    return replace(t, kernels=kernels, truth=truth)
