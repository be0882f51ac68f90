"""Random computational-graph generation with topological and dimensional randomness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .graph import (
    ComputationalGraph,
    DimensionSpec,
    LayerKind,
    LayerNode,
    conv_out,
    validate_graph,
)

K = LayerKind


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    block_count_range: tuple[int, int] = (3, 20)
    # probabilities of (sequential, add, concat)
    block_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    concat_branch_range: tuple[int, int] = (2, 4)
    concat_branch_depth: tuple[int, int] = (1, 2)
    add_depth_range: tuple[int, int] = (1, 3)
    keep_channels_probability: float = 0.5  # residual blocks that keep the input channel count
    fc_threshold: int = 1024
    fc_probability: float = 0.5
    fc_max_blocks: int = 2
    bn_probability: float = 0.5
    pool_probability: float = 0.4
    downsample_probability: float = 0.35
    channel_choices: tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel_choices: tuple[int, ...] = (1, 3, 5, 7)
    stride_choices: tuple[int, ...] = (1, 2)
    padding_choices: tuple[int, ...] = (0, 1, 2, 3)
    pool_kernel_choices: tuple[int, ...] = (2, 3)
    pool_padding_choices: tuple[int, ...] = (0, 1)
    fixed_input: tuple[int, int, int, int] = (1, 3, 32, 32)
    fixed_output_classes: int = 10

    def __post_init__(self):
        for name in ("block_count_range", "block_weights", "concat_branch_range",
                     "concat_branch_depth", "add_depth_range", "channel_choices",
                     "kernel_choices", "stride_choices", "padding_choices",
                     "pool_kernel_choices", "pool_padding_choices", "fixed_input"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.check()

    def check(self) -> None:
        if abs(sum(self.block_weights) - 1.0) > 1e-9 or len(self.block_weights) != 3:
            raise GenerationError(f"block_weights must be 3 probabilities summing to 1, got {self.block_weights}")
        if any(w < 0 for w in self.block_weights):
            raise GenerationError("block_weights must be nonnegative")
        for name in ("block_count_range", "concat_branch_range", "concat_branch_depth", "add_depth_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise GenerationError(f"{name} must be a nonempty range of positive integers")
        if self.concat_branch_range[0] < 2:
            raise GenerationError("concat blocks need at least 2 branches")
        for name in ("channel_choices", "kernel_choices", "stride_choices", "padding_choices",
                     "pool_kernel_choices", "pool_padding_choices"):
            if not getattr(self, name):
                raise GenerationError(f"{name} must be nonempty")
        if len(self.fixed_input) != 4 or min(self.fixed_input) < 1:
            raise GenerationError(f"fixed_input must be (N,C,H,W) >= 1, got {self.fixed_input}")
        if self.fixed_output_classes < 1:
            raise GenerationError("fixed_output_classes must be >= 1")
        for name in ("fc_probability", "bn_probability", "pool_probability", "downsample_probability",
                     "keep_channels_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GenerationError(f"{name} must lie in [0,1]")

    def with_seed(self, seed: int) -> "GenConfig":
        return replace(self, seed=seed)


@dataclass
class _Builder:
    cfg: GenConfig
    rng: np.random.Generator
    nodes: list[LayerNode] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)

    @property
    def n(self) -> int:
        return self.cfg.fixed_input[0]

    def emit(self, kind: LayerKind, dims: DimensionSpec, preds: list[int]) -> int:
        nid = len(self.nodes)
        if self.nodes and self.nodes[-1].kind is kind:
            raise GenerationError(f"internal: adjacent {kind} layers would be emitted")
        self.nodes.append(LayerNode(nid, kind, dims))
        for p in preds:
            self.edges.add((p, nid))
        return nid

    def last_kind(self) -> LayerKind | None:
        return self.nodes[-1].kind if self.nodes else None

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    # -- layer emitters; each takes and returns (tail_id, (c, h, w)) -------

    def conv(self, tail, shape, *, oc, k, p, s):
        c, h, w = shape
        oh, ow = conv_out(h, k, p, s), conv_out(w, k, p, s)
        d = DimensionSpec(self.n, c, h, w, oc, oh, ow, k, p, s)
        return self.emit(K.CONV, d, _preds(tail)), (oc, oh, ow)

    def passthrough(self, kind, tail, shape):
        c, h, w = shape
        d = DimensionSpec(self.n, c, h, w, c, h, w)
        return self.emit(kind, d, _preds(tail)), shape

    def pool(self, tail, shape, *, k, p, s):
        c, h, w = shape
        oh, ow = conv_out(h, k, p, s), conv_out(w, k, p, s)
        d = DimensionSpec(self.n, c, h, w, c, oh, ow, k, p, s)
        return self.emit(K.POOL, d, _preds(tail)), (c, oh, ow)

    def fc(self, tail, shape, *, oc):
        c, h, w = shape
        d = DimensionSpec(self.n, c * h * w, 1, 1, oc, 1, 1)
        return self.emit(K.FC, d, _preds(tail)), (oc, 1, 1)

    # -- random parameter choices ------------------------------------------

    def conv_params(self, shape, *, same: bool, allow_stride: bool):
        """Pick (k, p, s); padding is resampled until the output is nonempty."""
        cfg = self.cfg
        _, h, w = shape
        if same:
            ks = [k for k in cfg.kernel_choices if k % 2 == 1 and (k - 1) // 2 in cfg.padding_choices]
            if not ks:
                raise GenerationError("no odd kernel with matching 'same' padding in kernel_choices/padding_choices")
            k = self.pick(ks)
            s = 1
            if allow_stride and min(h, w) >= 2 and self.rng.random() < cfg.downsample_probability:
                strides = [x for x in cfg.stride_choices if x > 1]
                if strides:
                    s = self.pick(strides)
            return k, (k - 1) // 2, s
        s = 1
        if allow_stride and min(h, w) >= 2 and self.rng.random() < cfg.downsample_probability:
            strides = [x for x in cfg.stride_choices if x > 1]
            if strides:
                s = self.pick(strides)
        kernels = list(cfg.kernel_choices)
        self.rng.shuffle(kernels)
        for k in kernels:
            pads = list(cfg.padding_choices)
            self.rng.shuffle(pads)
            for p in pads:
                if conv_out(h, k, p, s) >= 1 and conv_out(w, k, p, s) >= 1:
                    return k, p, s
        raise GenerationError(
            f"no kernel/padding in choices yields OH >= 1 for a {h}x{w} feature map "
            f"(kernels {cfg.kernel_choices}, paddings {cfg.padding_choices})")

    def pool_params(self, shape):
        cfg = self.cfg
        _, h, w = shape
        opts = []
        for k in cfg.pool_kernel_choices:
            for p in cfg.pool_padding_choices:
                if 2 * p > k:
                    continue
                if conv_out(h, k, p, 2) >= 1 and conv_out(w, k, p, 2) >= 1:
                    opts.append((k, p, 2))
        return self.pick(opts) if opts else None

    # -- blocks --------------------------------------------------------------

    def seq_block(self, tail, shape, *, same=False, allow_pool=True):
        cfg = self.cfg
        k, p, s = self.conv_params(shape, same=same, allow_stride=not same)
        oc = self.pick(cfg.channel_choices)
        tail, shape = self.conv(tail, shape, oc=oc, k=k, p=p, s=s)
        if self.rng.random() < cfg.bn_probability:
            tail, shape = self.passthrough(K.BN, tail, shape)
        tail, shape = self.passthrough(K.RELU, tail, shape)
        if allow_pool and self.rng.random() < cfg.pool_probability and min(shape[1:]) >= 2:
            pp = self.pool_params(shape)
            if pp is not None:
                tail, shape = self.pool(tail, shape, k=pp[0], p=pp[1], s=pp[2])
        return tail, shape

    def fc_block(self, tail, shape):
        oc = self.pick(self.cfg.channel_choices)
        tail, shape = self.fc(tail, shape, oc=oc)
        if self.rng.random() < self.cfg.bn_probability:
            tail, shape = self.passthrough(K.BN, tail, shape)
        return self.passthrough(K.RELU, tail, shape)

    def add_block(self, tail, shape, *, allow_stride=True):
        """Main path of conv blocks plus a shortcut, merged by Add then ReLU.

        The shortcut is scheduled after the main path. When the main path
        changes the shape, the shortcut carries a 1x1 conv (and BN whenever
        the main path uses BN); BN is forced on in that case so that two
        convolutions are never adjacent in execution order.
        """
        cfg = self.cfg
        lo, hi = cfg.add_depth_range
        depth = int(self.rng.integers(lo, hi + 1))
        if self.rng.random() < cfg.keep_channels_probability:
            oc = shape[0]
        else:
            oc = self.pick(cfg.channel_choices)
        k0, p0, s = self.conv_params(shape, same=True, allow_stride=allow_stride)
        needs_proj = s != 1 or oc != shape[0]
        use_bn = needs_proj or self.rng.random() < cfg.bn_probability
        block_in, in_shape = tail, shape
        for j in range(depth):
            if j == 0:
                k, p, st = k0, p0, s
            else:
                k, p, st = self.conv_params(shape, same=True, allow_stride=False)
            tail, shape = self.conv(tail, shape, oc=oc, k=k, p=p, s=st)
            if use_bn:
                tail, shape = self.passthrough(K.BN, tail, shape)
            if j < depth - 1:
                tail, shape = self.passthrough(K.RELU, tail, shape)
        main_tail, main_shape = tail, shape
        if needs_proj:
            sc, sc_shape = self.conv(block_in, in_shape, oc=oc, k=1, p=0, s=s)
            if use_bn:
                sc, sc_shape = self.passthrough(K.BN, sc, sc_shape)
            assert sc_shape == main_shape
        else:
            sc = block_in
        c, h, w = main_shape
        d = DimensionSpec(self.n, c, h, w, c, h, w)
        add = self.emit(K.ADD, d, [main_tail, sc])
        return self.passthrough(K.RELU, add, main_shape)

    def concat_block(self, tail, shape):
        cfg = self.cfg
        lo, hi = cfg.concat_branch_range
        nbranch = int(self.rng.integers(lo, hi + 1))
        dlo, dhi = cfg.concat_branch_depth
        outs = []
        for _ in range(nbranch):
            btail, bshape = tail, shape
            for _ in range(int(self.rng.integers(dlo, dhi + 1))):
                if self.rng.random() < 0.5:
                    btail, bshape = self.seq_block(btail, bshape, same=True, allow_pool=False)
                else:
                    btail, bshape = self.add_block(btail, bshape, allow_stride=False)
            outs.append((btail, bshape))
        _, h, w = shape
        ctot = sum(bs[0] for _, bs in outs)
        d = DimensionSpec(self.n, ctot, h, w, ctot, h, w)
        node = self.emit(K.CONCAT, d, [bt for bt, _ in outs])
        return node, (ctot, h, w)


def _preds(tail):
    return [] if tail is None else [tail]


def generate(cfg: GenConfig) -> ComputationalGraph:
    """One random graph, fully determined by ``cfg`` (including its seed)."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    b = _Builder(cfg, rng)
    n, c, h, w = cfg.fixed_input
    tail, shape = None, (c, h, w)
    lo, hi = cfg.block_count_range
    nblocks = int(rng.integers(lo, hi + 1))
    fc_blocks = 0
    weights = np.asarray(cfg.block_weights, dtype=float)
    for i in range(nblocks):
        volume = shape[0] * shape[1] * shape[2]
        if fc_blocks:
            if fc_blocks >= cfg.fc_max_blocks:
                break
            tail, shape = b.fc_block(tail, shape)
            fc_blocks += 1
            continue
        if i > 0 and volume < cfg.fc_threshold and rng.random() < cfg.fc_probability:
            tail, shape = b.fc_block(tail, shape)
            fc_blocks += 1
            continue
        choice = 0 if i == 0 else int(rng.choice(3, p=weights))
        if choice == 0:
            tail, shape = b.seq_block(tail, shape)
        elif choice == 1:
            tail, shape = b.add_block(tail, shape)
        else:
            tail, shape = b.concat_block(tail, shape)
    # head
    if not fc_blocks and b.last_kind() is not K.POOL:
        _, hh, ww = shape
        if hh != ww:
            raise GenerationError(f"global pooling head needs a square map, got {hh}x{ww}")
        tail, shape = b.pool(tail, shape, k=hh, p=0, s=1)
    tail, shape = b.fc(tail, shape, oc=cfg.fixed_output_classes)
    g = ComputationalGraph(tuple(b.nodes), frozenset(b.edges))
    errs = validate_graph(g)
    if errs:
        raise GenerationError("generated graph is invalid: " + "; ".join(errs[:3]))
    return g


@dataclass(frozen=True)
class Sample:
    index: int
    seed: int
    graph: ComputationalGraph


def generate_dataset(cfg: GenConfig, count: int, split: float) -> tuple[list[Sample], list[Sample]]:
    """``count`` graphs with per-graph seeds ``cfg.seed + index``, split by a seeded shuffle."""
    if count <= 0:
        raise GenerationError("count must be positive")
    if not 0.0 < split < 1.0:
        raise GenerationError("split must lie strictly between 0 and 1")
    samples = [Sample(i, cfg.seed + i, generate(cfg.with_seed(cfg.seed + i))) for i in range(count)]
    order = np.random.default_rng([cfg.seed, count]).permutation(count)
    ntrain = int(round(split * count))
    train_idx = sorted(order[:ntrain].tolist())
    val_idx = sorted(order[ntrain:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def split_indices(seed: int, count: int, split: float) -> tuple[list[int], list[int]]:
    order = np.random.default_rng([seed, count]).permutation(count)
    ntrain = int(round(split * count))
    return sorted(order[:ntrain].tolist()), sorted(order[ntrain:].tolist())


def resnet18_family(width: int = 16, input_shape=(1, 3, 64, 64), classes: int = 10) -> ComputationalGraph:
    """ResNet18 topology: stem, four stages of two basic blocks, pooling, FC.

    Block pattern is B0 B1 B1 B2 B1 B2 B1 B2 B3 F1 where B0 is the stem,
    B1 an identity basic block, B2 a downsampling block with a projection
    shortcut, B3 the last identity block followed by global pooling and F1
    the classifier.
    """
    cfg = GenConfig(fixed_input=tuple(input_shape))
    b = _Builder(cfg, np.random.default_rng(0))
    _, c, h, w = input_shape
    tail, shape = b.conv(None, (c, h, w), oc=width, k=7, p=3, s=2)
    tail, shape = b.passthrough(K.BN, tail, shape)
    tail, shape = b.passthrough(K.RELU, tail, shape)
    tail, shape = b.pool(tail, shape, k=3, p=1, s=2)

    def basic(tail, shape, oc, s):
        block_in, in_shape = tail, shape
        tail, shape = b.conv(tail, shape, oc=oc, k=3, p=1, s=s)
        tail, shape = b.passthrough(K.BN, tail, shape)
        tail, shape = b.passthrough(K.RELU, tail, shape)
        tail, shape = b.conv(tail, shape, oc=oc, k=3, p=1, s=1)
        tail, shape = b.passthrough(K.BN, tail, shape)
        sc = block_in
        if s != 1 or oc != in_shape[0]:
            sc, _ = b.conv(block_in, in_shape, oc=oc, k=1, p=0, s=s)
            sc, _ = b.passthrough(K.BN, sc, shape)
        add = b.emit(K.ADD, DimensionSpec(b.n, *shape, *shape), [tail, sc])
        return b.passthrough(K.RELU, add, shape)

    for stage, mult in enumerate((1, 2, 4, 8)):
        stride = 1 if stage == 0 else 2
        tail, shape = basic(tail, shape, width * mult, stride)
        tail, shape = basic(tail, shape, width * mult, 1)
    tail, shape = b.pool(tail, shape, k=shape[1], p=0, s=1)
    tail, shape = b.fc(tail, shape, oc=classes)
    g = ComputationalGraph(tuple(b.nodes), frozenset(b.edges))
    errs = validate_graph(g)
    if errs:
        raise GenerationError("; ".join(errs))
    return g


def vgg_family(cfg_list=(16, "M", 32, "M", 64, 64, "M"), input_shape=(1, 3, 32, 32), classes: int = 10,
               bn: bool = False) -> ComputationalGraph:
    """Plain chain network in the VGG style; ``"M"`` entries are 2x2 max pools."""
    cfg = GenConfig(fixed_input=tuple(input_shape))
    b = _Builder(cfg, np.random.default_rng(0))
    _, c, h, w = input_shape
    tail, shape = None, (c, h, w)
    for item in cfg_list:
        if item == "M":
            tail, shape = b.pool(tail, shape, k=2, p=0, s=2)
        else:
            tail, shape = b.conv(tail, shape, oc=int(item), k=3, p=1, s=1)
            if bn:
                tail, shape = b.passthrough(K.BN, tail, shape)
            tail, shape = b.passthrough(K.RELU, tail, shape)
    if b.last_kind() is not K.POOL:
        tail, shape = b.pool(tail, shape, k=shape[1], p=0, s=1)
    tail, shape = b.fc(tail, shape, oc=classes)
    return ComputationalGraph(tuple(b.nodes), frozenset(b.edges))


def block_pattern(kinds) -> list[str] | None:
    """Parse a ResNet-style layer sequence into block names.

    Only critical layers and pools are consulted, so BN/ReLU slips do not
    change the result. Returns None when the sequence does not parse.
    """
    toks = [LayerKind(k) for k in kinds]
    toks = [t for t in toks if t in (K.CONV, K.POOL, K.ADD, K.FC, K.CONCAT)]
    grammar = [
        ("B2", [K.CONV, K.CONV, K.CONV, K.ADD]),
        ("B3", [K.CONV, K.CONV, K.ADD, K.POOL]),
        ("B1", [K.CONV, K.CONV, K.ADD]),
        ("B0", [K.CONV, K.POOL]),
        ("F1", [K.FC]),
    ]
    out = []
    i = 0
    while i < len(toks):
        for name, pat in grammar:
            if toks[i:i + len(pat)] == pat:
                out.append(name)
                i += len(pat)
                break
        else:
            return None
    return out
