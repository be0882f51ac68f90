"""Per-kernel feature sequences from bus traces."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tracesim import TraceBundle

FEATURE_NAMES = ("exe_lat", "r_v", "w_v", "rv_wv", "iv_wv", "kdd")
N_FEATURES = len(FEATURE_NAMES)
KDD_CAP = 64
LOG_DIMS = (0, 1, 2)  # exe_lat, r_v, w_v


@dataclass(frozen=True)
class KernelFeature:
    exe_lat: float
    r_v: float
    w_v: float
    rv_wv: float
    iv_wv: float
    kdd: float


class RawIndex:
    """Read-after-write lookup for a whole trace.

    For every read request, ``writer`` holds the index of the most recent
    earlier kernel that wrote the same address, or -1 when the address was
    never written before (weights, input image, workspace).
    """

    def __init__(self, t: TraceBundle):
        nk = len(t.kernels)
        self.n_kernels = nk
        reads, rk, writes, wk = [], [], [], []
        for k in t.kernels:
            r = k.read_addresses
            w = k.write_addresses
            reads.append(r)
            rk.append(np.full(len(r), k.index, dtype=np.int64))
            writes.append(w)
            wk.append(np.full(len(w), k.index, dtype=np.int64))
        cat = lambda parts, dt: np.concatenate(parts) if parts else np.empty(0, dt)
        self.read_addr = cat(reads, np.uint64)
        self.read_kernel = cat(rk, np.int64)
        waddr = cat(writes, np.uint64)
        wkern = cat(wk, np.int64)
        self.read_offsets = np.cumsum([0] + [len(r) for r in reads])
        self.writer = np.full(len(self.read_addr), -1, dtype=np.int64)
        if len(waddr) and len(self.read_addr):
            lines, wline = np.unique(waddr, return_inverse=True)
            stride = nk + 1
            wkeys = np.unique(wline.astype(np.int64) * stride + wkern)
            pos = np.searchsorted(lines, self.read_addr)
            pos_c = np.minimum(pos, len(lines) - 1)
            hit = lines[pos_c] == self.read_addr
            rkey = pos_c.astype(np.int64) * stride + self.read_kernel
            j = np.searchsorted(wkeys, rkey, side="left") - 1
            ok = hit & (j >= 0)
            jj = np.maximum(j, 0)
            ok &= (wkeys[jj] // stride) == pos_c
            self.writer[ok] = wkeys[jj[ok]] % stride

    def kernel_writers(self, kernel_index: int) -> np.ndarray:
        a, b = self.read_offsets[kernel_index], self.read_offsets[kernel_index + 1]
        return self.writer[a:b]

    def kernel_reads(self, kernel_index: int) -> np.ndarray:
        a, b = self.read_offsets[kernel_index], self.read_offsets[kernel_index + 1]
        return self.read_addr[a:b]


def compute_kdd(t: TraceBundle, kernel_index: int, index: RawIndex | None = None) -> int:
    """Largest kernel distance from ``kernel_index`` back to any kernel whose writes it reads."""
    if not 0 <= kernel_index < len(t.kernels):
        raise IndexError(kernel_index)
    index = index or RawIndex(t)
    w = index.kernel_writers(kernel_index)
    w = w[w >= 0]
    if not len(w):
        return 0
    return int(kernel_index - w.min())


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    log_dims: tuple[int, ...] = LOG_DIMS

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "log_dims": list(self.log_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(map(float, d["mean"])), tuple(map(float, d["std"])),
                   tuple(int(x) for x in d.get("log_dims", LOG_DIMS)))

    def matches(self, other: "NormStats", tol: float = 1e-9) -> bool:
        return (self.log_dims == other.log_dims
                and np.allclose(self.mean, other.mean, rtol=tol, atol=tol)
                and np.allclose(self.std, other.std, rtol=tol, atol=tol))


@dataclass(frozen=True)
class FeatureSequence:
    values: np.ndarray  # (T, 6)
    normalized: bool = False
    stats: NormStats | None = None

    def __len__(self) -> int:
        return len(self.values)

    @property
    def features(self) -> list[KernelFeature]:
        return [KernelFeature(*map(float, row)) for row in self.values]

    def projection3d(self) -> np.ndarray:
        """(exe_lat, R_v/W_v, I_v/W_v) per kernel, for scatter diagnostics."""
        return self.values[:, [0, 3, 4]]


def extract(t: TraceBundle, kdd_cap: int = KDD_CAP, index: RawIndex | None = None) -> FeatureSequence:
    nk = len(t.kernels)
    if nk == 0:
        return FeatureSequence(np.zeros((0, N_FEATURES)))
    index = index or RawIndex(t)
    line = t.line_size
    out = np.zeros((nk, N_FEATURES))
    h2d = t.h2d_bytes or 0
    prev_w = float(h2d)
    for k in t.kernels:
        i = k.index
        r_v = float(k.n_reads * line)
        w_v = float(k.n_writes * line)
        denom = max(w_v, float(line))
        w = index.kernel_writers(i)
        w = w[w >= 0]
        kdd = float(min(kdd_cap, i - w.min())) if len(w) else 0.0
        out[i] = (k.end - k.start, r_v, w_v, r_v / denom, prev_w / denom, kdd)
        prev_w = w_v
    return FeatureSequence(out)


def fit_stats(seqs, log_dims=LOG_DIMS) -> NormStats:
    x = np.concatenate([s.values for s in seqs if len(s)])
    x = x.copy()
    x[:, list(log_dims)] = np.log1p(x[:, list(log_dims)])
    return NormStats(tuple(x.mean(0).tolist()), tuple(x.std(0).tolist()), tuple(log_dims))


def normalize(fs: FeatureSequence, stats: NormStats | None = None) -> FeatureSequence:
    """log1p on the configured dims, then per-dimension z-score.

    Applying this to an already normalized sequence is an error. A dimension
    with zero spread is only centered.
    """
    if fs.normalized:
        raise ValueError("feature sequence is already normalized")
    if stats is None:
        stats = fit_stats([fs])
    x = fs.values.astype(float, copy=True)
    if len(x):
        dims = list(stats.log_dims)
        x[:, dims] = np.log1p(x[:, dims])
        mean = np.asarray(stats.mean)
        std = np.asarray(stats.std)
        safe = np.where(std > 0, std, 1.0)
        x = (x - mean) / safe
    return FeatureSequence(x, True, stats)


def dumps_features(fs: FeatureSequence) -> str:
    lines = ["#features v1"]
    stats = fs.stats.to_dict() if fs.stats else None
    lines.append("#stats " + json.dumps({"normalized": fs.normalized, "stats": stats}))
    lines.extend("\t".join(repr(float(v)) for v in row) for row in fs.values)
    return "\n".join(lines) + "\n"


def loads_features(text: str) -> FeatureSequence:
    lines = text.rstrip("\n").split("\n")
    if not lines or lines[0] != "#features v1":
        raise ValueError("line 1: missing '#features v1' header")
    if len(lines) < 2 or not lines[1].startswith("#stats "):
        raise ValueError("line 2: missing stats line")
    meta = json.loads(lines[1][len("#stats "):])
    rows = []
    for no, ln in enumerate(lines[2:], start=3):
        parts = ln.split("\t")
        if len(parts) != N_FEATURES:
            raise ValueError(f"line {no}: expected {N_FEATURES} fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    vals = np.array(rows, dtype=float).reshape(-1, N_FEATURES)
    stats = NormStats.from_dict(meta["stats"]) if meta.get("stats") else None
    return FeatureSequence(vals, bool(meta.get("normalized")), stats)


def write_features(fs: FeatureSequence, path: str | Path) -> None:
    Path(path).write_text(dumps_features(fs))


def read_features(path: str | Path) -> FeatureSequence:
    return loads_features(Path(path).read_text())
