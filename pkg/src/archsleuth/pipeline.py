"""Dataset generation, training, extraction and evaluation on top of the library modules."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .dims import SearchConfig, estimate_dimensions
from .features import (KDD_CAP, FeatureSequence, NormStats, RawIndex, dumps_features, extract, fit_stats,
                       normalize, read_features)
from .generator import GenConfig, Sample, generate, generate_dataset
from .graph import (KINDS, ComputationalGraph, LayerKind, dumps_graph, layer_sequence_of,
                    load_graph)
from .identifier.ctc import beam_decode, decode_labels, encode, greedy_decode
from .identifier.lstm import IdentifierModel, checkpoint_dict, load_checkpoint, lstm_forward
from .identifier.metrics import label_error_rate
from .identifier.mlp import MLPModel, MLPTrainConfig, mlp_predict, train_mlp
from .identifier.train import EpochRecord, Example, TrainConfig, train
from .topology import assign_kernels_to_layers, edge_f1, oracle_assignment, reconstruct
from .tracesim import (SimConfig, SimTruth, TraceBundle, dumps_trace, inject_noise, read_trace,
                       simulate, truth_to_dict)

log = logging.getLogger(__name__)

THREADS_ENV = "ARCHSLEUTH_THREADS"


class UsageError(ValueError):
    """Bad configuration or arguments."""


class MismatchError(ValueError):
    """Checkpoint and dataset disagree."""


class DataParseError(ValueError):
    """A dataset file exists but cannot be parsed."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage, self.cause = stage, cause


# ------------------------------------------------------------------ config

_SECTIONS: dict[str, type] = {
    "gen": GenConfig,
    "sim": SimConfig,
    "train": TrainConfig,
    "mlp": MLPTrainConfig,
    "search": SearchConfig,
}


def default_config() -> dict:
    text = resources.files("archsleuth").joinpath("default_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in out:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where!r} must be a mapping")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                base: dict | None = None) -> dict:
    """Shipped defaults (or ``base``), then the optional JSON file, then ``section.key=value`` overrides."""
    cfg = default_config() if base is None else _merge(default_config(), base)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: Any = value
        for part in reversed(key.split(".")):
            nested = {part: nested}
        cfg = _merge(cfg, nested)
    check_config(cfg)
    return cfg


def section(cfg: dict, name: str):
    """Typed view of one config section."""
    try:
        return _SECTIONS[name](**cfg[name])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {name} config: {e}") from e


def check_config(cfg: dict) -> None:
    for name in _SECTIONS:
        obj = section(cfg, name)
        if hasattr(obj, "check"):
            try:
                obj.check()
            except ValueError as e:
                raise UsageError(f"invalid {name} config: {e}") from e
    ds = cfg["dataset"]
    if not isinstance(ds["count"], int) or ds["count"] < 1:
        raise UsageError("dataset.count must be a positive integer")
    if not 0.0 < float(ds["split"]) < 1.0:
        raise UsageError("dataset.split must lie strictly between 0 and 1")
    if int(cfg["features"]["kdd_cap"]) < 1:
        raise UsageError("features.kdd_cap must be at least 1")
    ev = cfg["eval"]
    grid = ev["noise_levels"]
    if list(grid) != sorted(grid) or any(not 0.0 <= p <= 1.0 for p in grid):
        raise UsageError("eval.noise_levels must be ascending fractions in [0,1]")
    if ev["noise_seeds"] < 1:
        raise UsageError("eval.noise_seeds must be at least 1")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ persistence


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict[str, int]
    dataset: str | None = None
    checkpoint: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)
    tool_version: str = __version__
    samples: list[dict] = field(default_factory=list)  # index, seed and split per sample

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        return cls(**doc)

    def write(self, path: str | Path) -> None:
        """Paths are relative to the manifest directory and must exist."""
        base = Path(path).parent
        for rel in [self.dataset, self.checkpoint, *self.files]:
            if rel is not None and not (base / rel).exists():
                raise FileNotFoundError(f"manifest refers to missing path {rel}")
        atomic_write(path, _json(self.to_dict()))


def _rel(p: Path, base: Path) -> str:
    return os.path.relpath(p, base)


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be at least 1")
    return n


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Order-preserving map; results do not depend on the worker count."""
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


# ------------------------------------------------------------------ dataset


@dataclass(frozen=True)
class DatasetEntry:
    index: int
    seed: int
    split: str
    graph: ComputationalGraph
    features: FeatureSequence

    @property
    def target(self) -> tuple[int, ...]:
        return tuple(encode(layer_sequence_of(self.graph)))


def sample_stem(index: int) -> str:
    return f"sample_{index:05d}"


def _materialize(job: tuple) -> tuple[int, str]:
    sample, split, sim_cfg, kdd_cap, out_dir, write_traces = job
    t = simulate(sample.graph, sim_cfg, seed=sample.seed)
    stem = Path(out_dir) / sample_stem(sample.index)
    atomic_write(stem.with_suffix(".json"), dumps_graph(sample.graph))
    labels = {"index": sample.index, "seed": sample.seed, "split": split,
              "sequence": [k.value for k in layer_sequence_of(sample.graph)],
              "truth": truth_to_dict(t.truth)}
    atomic_write(Path(f"{stem}.labels.json"), _json(labels))
    atomic_write(Path(f"{stem}.features.tsv"), dumps_features(extract(t, kdd_cap)))
    if write_traces:
        atomic_write(Path(f"{stem}.trace"), dumps_trace(t.without_truth()))
    return sample.index, split


def cmd_gen(cfg: dict, out: str | Path, traces: bool | None = None) -> RunManifest:
    """Graphs, label sidecars and raw features for every sample plus a manifest."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise UsageError(f"{out} is not writable")
    ds = cfg["dataset"]
    gen_cfg = section(cfg, "gen")
    sim_cfg = section(cfg, "sim")
    write_traces = ds["write_traces"] if traces is None else traces
    tr, va = generate_dataset(gen_cfg, ds["count"], ds["split"])
    cap = cfg["features"]["kdd_cap"]
    jobs = [(s, "train", sim_cfg, cap, str(out), write_traces) for s in tr]
    jobs += [(s, "val", sim_cfg, cap, str(out), write_traces) for s in va]
    jobs.sort(key=lambda j: j[0].index)
    parallel_map(_materialize, jobs)
    entries = load_dataset(out, require_manifest=False, config=cfg)
    stats = fit_stats([e.features for e in entries if e.split == "train"],
                      tuple(cfg["features"]["log_dims"]))
    atomic_write(out / "stats.json", _json(stats.to_dict()))
    atomic_write(out / "config.json", _json(cfg))
    files = ["config.json", "stats.json"]
    for e in entries:
        stem = sample_stem(e.index)
        files += [f"{stem}.json", f"{stem}.labels.json", f"{stem}.features.tsv"]
        if write_traces:
            files.append(f"{stem}.trace")
    m = RunManifest(config_hash(cfg), {"gen": gen_cfg.seed}, dataset=".", files=files)
    m.metrics = {"train_samples": float(len(tr)), "val_samples": float(len(va))}
    m.samples = [{"index": e.index, "seed": e.seed, "split": e.split} for e in entries]
    m.write(out / "manifest.json")
    return m


def _read_labels_doc(path: Path) -> dict:
    return json.loads(path.read_text())


def load_dataset(root: str | Path, require_manifest: bool = True,
                 config: dict | None = None) -> list[DatasetEntry]:
    root = Path(root)
    if require_manifest and not (root / "manifest.json").exists():
        raise UsageError(f"{root} has no manifest.json; run gen first")
    out = []
    for gpath in sorted(root.glob("sample_*.json")):
        if gpath.name.endswith(".labels.json"):
            continue
        stem = gpath.with_suffix("")
        try:
            lab = _read_labels_doc(Path(f"{stem}.labels.json"))
            out.append(DatasetEntry(lab["index"], lab["seed"], lab["split"], load_graph(gpath),
                                    read_features(Path(f"{stem}.features.tsv"))))
        except (ValueError, KeyError) as e:
            raise DataParseError(f"{stem.name}: {e}") from e
    if not out:
        raise UsageError(f"{root} holds no samples")
    return out


def dataset_config(root: str | Path) -> dict:
    return json.loads((Path(root) / "config.json").read_text())


def dataset_stats(root: str | Path) -> NormStats:
    return NormStats.from_dict(json.loads((Path(root) / "stats.json").read_text()))


def resimulate(entry: DatasetEntry, sim_cfg: SimConfig) -> TraceBundle:
    """Traces are a pure function of (graph, seed); datasets need not store them."""
    return simulate(entry.graph, sim_cfg, seed=entry.seed)


# ------------------------------------------------------------------ training


def examples(entries: Iterable[DatasetEntry], stats: NormStats) -> list[Example]:
    return [Example(normalize(e.features, stats).values, e.target) for e in entries]


def kernel_labels(truth: SimTruth) -> np.ndarray:
    return np.array([KINDS.index(LayerKind(truth.layer_kinds[l])) for l in truth.kernel_layer],
                    dtype=np.int64)


REALIZATION_STRIDE = 1_000_003  # simulator seed offset between trace realizations of one graph


def _realization(job: tuple) -> FeatureSequence:
    g, sim_cfg, seed, kdd_cap = job
    return extract(simulate(g, sim_cfg, seed=seed), kdd_cap)


def cmd_train(dataset: str | Path, out: str | Path, cfg: dict | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None) -> RunManifest:
    """Checkpoint plus a per-epoch loss / validation LER table."""
    dataset, out = Path(dataset), Path(out)
    cfg = cfg or dataset_config(dataset)
    tcfg = section(cfg, "train")
    entries = load_dataset(dataset)
    stats = dataset_stats(dataset)
    train_e = [e for e in entries if e.split == "train"]
    tr = examples(train_e, stats)
    va = examples([e for e in entries if e.split == "val"], stats)
    jobs = [(e.graph, section(cfg, "sim"), e.seed + REALIZATION_STRIDE * r, cfg["features"]["kdd_cap"])
            for r in range(1, tcfg.realizations) for e in train_e]
    feats = parallel_map(_realization, jobs)
    views = [[Example(normalize(f, stats).values, e.target) for f, e in zip(feats[i:i + len(train_e)], train_e)]
             for i in range(0, len(feats), len(train_e))]
    rows = ["epoch\ttrain_loss\tval_ler"]

    def record(rec: EpochRecord) -> None:
        rows.append(f"{rec.epoch}\t{rec.train_loss:.6f}\t"
                    + ("-" if rec.val_ler is None else f"{rec.val_ler:.6f}"))
        if on_epoch:
            on_epoch(rec)

    result = train(tr, tcfg, va or None, on_epoch=record, views=views)
    model = result.model
    model.stats = stats
    out.mkdir(parents=True, exist_ok=True)
    doc = checkpoint_dict(model)
    doc["extra"] = {"best_epoch": result.best_epoch, "config_hash": config_hash(cfg)}
    atomic_write(out / "checkpoint.json", json.dumps(doc))
    atomic_write(out / "loss_curve.tsv", "\n".join(rows) + "\n")
    best = min((r.val_ler for r in result.history if r.val_ler is not None), default=None)
    m = RunManifest(config_hash(cfg), {"gen": cfg["gen"]["seed"], "train": tcfg.seed},
                    dataset=_rel(dataset, out), checkpoint="checkpoint.json", files=["loss_curve.tsv"])
    if best is not None:
        m.metrics["val_ler_greedy_best"] = best
    m.write(out / "manifest.json")
    return m


# ------------------------------------------------------------------ extraction


@dataclass
class Extraction:
    features: FeatureSequence
    probs: np.ndarray
    sequence: list[LayerKind]
    assignment: np.ndarray
    topology: Any
    dims: Any


def decode_sequence(model: IdentifierModel, fs: FeatureSequence, beam_width: int | None) -> tuple[list[LayerKind], np.ndarray]:
    if model.stats is None:
        raise MismatchError("checkpoint carries no normalization statistics")
    probs = lstm_forward(model, normalize(fs, model.stats)).probs
    labels = greedy_decode(probs) if beam_width == 1 else beam_decode(probs, beam_width)
    return decode_labels(labels), probs


def run_extraction(t: TraceBundle, model: IdentifierModel, search: SearchConfig = SearchConfig(),
                   beam_width: int | None = 8, kdd_cap: int = KDD_CAP) -> Extraction:
    """Features, sequence, topology and dimensions; failures name their stage."""
    stage = "features"
    try:
        index = RawIndex(t)
        fs = extract(t, kdd_cap, index=index)
        stage = "decode"
        seq, probs = decode_sequence(model, fs, beam_width)
        stage = "topology"
        assignment = assign_kernels_to_layers(seq, probs)
        topo = reconstruct(seq, t, assignment, index)
        stage = "dimensions"
        dims = estimate_dimensions(topo, t, assignment, search, index)
    except (MismatchError, StageError):
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(stage, e) from e
    return Extraction(fs, probs, seq, assignment, topo, dims)


def cmd_extract(trace: str | Path, checkpoint: str | Path, out: str | Path,
                cfg: dict | None = None, noise: float = 0.0) -> Extraction:
    """Run on an isolated copy of the trace so no sidecar file is reachable."""
    cfg = cfg or default_config()
    model = load_checkpoint(checkpoint)
    search = dataclasses.replace(section(cfg, "search"), noise=float(noise))
    with tempfile.TemporaryDirectory(prefix="archsleuth-extract-") as view:
        local = Path(view) / "input.trace"
        shutil.copyfile(trace, local)
        t = read_trace(local)
    ex = run_extraction(t, model, search, cfg["eval"]["beam_width"], cfg["features"]["kdd_cap"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["kernel\tlayer\tkind"]
    rows += [f"{i}\t{a}\t{ex.sequence[a].value}" for i, a in enumerate(ex.assignment.tolist())]
    atomic_write(out / "step1_sequence.tsv", "\n".join(rows) + "\n")
    atomic_write(out / "step2_topology.json", ex.topology.dumps())
    header = f"#tolerance\t{search.rel_tol:.4f}\t{'widened' if search.noise > 0 else 'nominal'}\n"
    atomic_write(out / "step3_dims.tsv", header + ex.dims.report())
    if ex.dims.solved:
        atomic_write(out / "step4_graph.json", dumps_graph(ex.dims.to_graph()))
    return ex


# ------------------------------------------------------------------ evaluation


def sequences_ler(preds: Sequence[Sequence[LayerKind]], entries: Sequence[DatasetEntry]) -> float:
    return label_error_rate(preds, [layer_sequence_of(e.graph) for e in entries])


def lstm_predictions(model: IdentifierModel, seqs: Iterable[FeatureSequence],
                     beam_width: int | None) -> list[list[LayerKind]]:
    return [decode_sequence(model, fs, beam_width)[0] for fs in seqs]


def noise_sweep(model: IdentifierModel, entries: Sequence[DatasetEntry], sim_cfg: SimConfig,
                levels: Sequence[float], seeds: int, beam_width: int | None,
                kdd_cap: int = KDD_CAP) -> list[dict]:
    """Mean LER and its standard error over repeat seeds, one row per level.

    Seed s is one repeat measurement: its own trace realization of every graph
    (seed 0 is the stored trace) and its own noise draw at every level.
    """
    oracles = [layer_sequence_of(e.graph) for e in entries]
    preds: dict[tuple[float, int], list] = {(p, s): [] for p in levels for s in range(seeds)}
    for e in entries:
        for s in range(seeds):
            t = resimulate(e, sim_cfg) if s == 0 else simulate(e.graph, sim_cfg, seed=e.seed * 1000 + s)
            for p in levels:
                tn = inject_noise(t, p, seed=e.seed * 1000 + s) if p else t
                preds[(p, s)].append(decode_sequence(model, extract(tn, kdd_cap), beam_width)[0])
    rows = []
    for p in levels:
        v = np.array([label_error_rate(preds[(p, s)], oracles) for s in range(seeds)])
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append({"noise": p, "ler": float(v.mean()), "stderr": se, "runs": len(v)})
    return rows


def train_baseline(entries: Sequence[DatasetEntry], sim_cfg: SimConfig, stats: NormStats,
                   cfg: MLPTrainConfig, realizations: int = 1, kdd_cap: int = KDD_CAP) -> MLPModel:
    """Per-kernel MLP on the same trace realizations the identifier trains on.

    Kernel labels come from re-simulated ground truth.
    """
    data = []
    for r in range(realizations):
        for e in entries:
            t = simulate(e.graph, sim_cfg, seed=e.seed + REALIZATION_STRIDE * r)
            fs = e.features if r == 0 else extract(t, kdd_cap)
            data.append((normalize(fs, stats).values, kernel_labels(t.truth)))
    return train_mlp(data, cfg)


def chain_entries(cfg: dict, count: int) -> list[DatasetEntry]:
    gen_cfg = dataclasses.replace(section(cfg, "gen"), seed=cfg["eval"]["chain_seed"],
                                  block_weights=(1.0, 0.0, 0.0))
    sim_cfg = section(cfg, "sim")
    cap = cfg["features"]["kdd_cap"]
    samples = [Sample(i, gen_cfg.seed + i, generate(gen_cfg.with_seed(gen_cfg.seed + i)))
               for i in range(count)]
    return [DatasetEntry(s.index, s.seed, "chain", s.graph, extract(simulate(s.graph, sim_cfg, seed=s.seed), cap))
            for s in samples]


def topology_scores(entries: Sequence[DatasetEntry], sim_cfg: SimConfig) -> dict[str, float]:
    """Edge F1 and exact-match rate given oracle sequences and kernel assignment."""
    f1s, exact = [], []
    for e in entries:
        t = resimulate(e, sim_cfg)
        a = oracle_assignment(e.graph, t.truth)
        topo = reconstruct(layer_sequence_of(e.graph), t, a)
        truth = e.graph.position_edges()
        f1s.append(edge_f1(topo.edges, truth))
        exact.append(set(topo.edges) == truth)
    return {"edge_f1": float(np.mean(f1s)), "edge_exact": float(np.mean(exact))}


def dims_scores(entries: Sequence[DatasetEntry], sim_cfg: SimConfig, search: SearchConfig,
                noise: float = 0.0, noise_seed: int = 0) -> dict[str, float]:
    """Fraction of layers whose true spec is among the candidates, with oracle structure."""
    hit = total = singles = single_total = unsat = top_ok = 0
    search = dataclasses.replace(search, noise=noise)
    for e in entries:
        t = resimulate(e, sim_cfg)
        a = oracle_assignment(e.graph, t.truth)
        tn = inject_noise(t, noise, seed=noise_seed + e.seed) if noise else t
        topo = reconstruct(layer_sequence_of(e.graph), tn, a)
        est = estimate_dimensions(topo, tn, a, search)
        unsat += bool(est.unsat)
        truth = [nd.dims for nd in e.graph.nodes]
        for nd, sol, d in zip(e.graph.nodes, est.layers, truth):
            total += 1
            hit += d in sol.specs
            if nd.kind in (LayerKind.RELU, LayerKind.BN, LayerKind.ADD):
                single_total += 1
                singles += len(sol.candidates) == 1
        top_ok += est.top is not None and list(est.top) == truth
    return {"containment": hit / max(total, 1),
            "singleton_rate": singles / max(single_total, 1),
            "unsat_graphs": float(unsat),
            "top_exact_graphs": top_ok / max(len(entries), 1)}


def _fmt_table(header: Sequence[str], rows: Iterable[Sequence]) -> list[str]:
    out = ["\t".join(header)]
    for r in rows:
        out.append("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
    return out


def cmd_eval(dataset: str | Path, checkpoint: str | Path, out: str | Path,
             cfg: dict | None = None) -> RunManifest:
    dataset, out = Path(dataset), Path(out)
    cfg = cfg or dataset_config(dataset)
    ev = cfg["eval"]
    model = load_checkpoint(checkpoint)
    stats = dataset_stats(dataset)
    if model.stats is None or not model.stats.matches(stats):
        raise MismatchError("checkpoint feature statistics differ from the dataset's")
    sim_cfg = section(cfg, "sim")
    entries = load_dataset(dataset)
    train_e = [e for e in entries if e.split == "train"]
    val_e = [e for e in entries if e.split == "val"]
    bw = ev["beam_width"]
    metrics: dict[str, float] = {}
    lines = ["#eval v1", f"#config\t{config_hash(cfg)}"]

    corpora = [("val", val_e), ("train", train_e[:ev["train_subset"]])]
    lines += ["", "#ler_per_corpus"]
    rows = []
    for name, es in corpora:
        if es:
            ler = sequences_ler(lstm_predictions(model, (e.features for e in es), bw), es)
            metrics[f"ler_{name}"] = ler
            rows.append((name, len(es), ler))
    lines += _fmt_table(("corpus", "graphs", "ler"), rows)

    sweep = noise_sweep(model, val_e[:ev["sweep_graphs"]], sim_cfg, ev["noise_levels"],
                        ev["noise_seeds"], bw, cfg["features"]["kdd_cap"])
    reference = {float(k): v for k, v in ev["reference_noise_ler"].items()}
    lines += ["", "#noise_sweep"]
    lines += _fmt_table(("noise_pct", "ler", "stderr", "runs", "reference"),
                        ((f"{100 * r['noise']:g}", r["ler"], r["stderr"], r["runs"],
                          reference.get(r["noise"], "-")) for r in sweep))
    for r in sweep:
        metrics[f"ler_noise_{100 * r['noise']:g}"] = r["ler"]

    mlp = train_baseline(train_e, sim_cfg, stats, section(cfg, "mlp"), cfg["train"]["realizations"],
                         cfg["features"]["kdd_cap"])
    chain = chain_entries(cfg, ev["chain_graphs"])
    comp = []
    for name, es in (("complex", val_e), ("chain", chain)):
        l_lstm = sequences_ler(lstm_predictions(model, (e.features for e in es), bw), es)
        l_mlp = sequences_ler([mlp_predict(mlp, normalize(e.features, stats)) for e in es], es)
        metrics[f"ler_lstm_{name}"], metrics[f"ler_mlp_{name}"] = l_lstm, l_mlp
        comp.append((name, len(es), l_lstm, l_mlp))
    lines += ["", "#model_comparison"]
    lines += _fmt_table(("corpus", "graphs", "lstm_ctc", "mlp"), comp)

    topo = topology_scores(val_e, sim_cfg)
    dims = dims_scores(val_e[:ev["dims_graphs"]], sim_cfg, section(cfg, "search"))
    metrics.update({f"topology_{k}": v for k, v in topo.items()})
    metrics.update({f"dims_{k}": v for k, v in dims.items()})
    lines += ["", "#structure"]
    lines += _fmt_table(("metric", "value"), [(k, v) for k, v in {**topo, **{f"dims_{k}": v for k, v in dims.items()}}.items()])

    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "metrics.tsv", "\n".join(lines) + "\n")
    m = RunManifest(config_hash(cfg), {"gen": cfg["gen"]["seed"], "train": cfg["train"]["seed"],
                                       "mlp": cfg["mlp"]["seed"], "chain": ev["chain_seed"]},
                    dataset=_rel(dataset, out), checkpoint=_rel(Path(checkpoint), out),
                    metrics=metrics, files=["metrics.tsv"])
    m.write(out / "manifest.json")
    return m


def cmd_e2e(cfg: dict, out: str | Path, on_epoch=None) -> RunManifest:
    """gen, train, extract on the first validation trace, eval; all under ``out``."""
    out = Path(out)
    cmd_gen(cfg, out / "dataset")
    cmd_train(out / "dataset", out / "model", cfg, on_epoch)
    entries = [e for e in load_dataset(out / "dataset") if e.split == "val"]
    t = resimulate(entries[0], section(cfg, "sim"))
    trace_path = out / "extract" / "input.trace"
    atomic_write(trace_path, dumps_trace(t.without_truth()))
    cmd_extract(trace_path, out / "model" / "checkpoint.json", out / "extract", cfg)
    m = cmd_eval(out / "dataset", out / "model" / "checkpoint.json", out / "eval", cfg)
    m.files = [_rel(out / "eval" / f, out) for f in m.files]
    m.files += [_rel(p, out) for p in sorted((out / "extract").iterdir())]
    m.dataset, m.checkpoint = "dataset", "model/checkpoint.json"
    m.write(out / "manifest.json")
    return m
