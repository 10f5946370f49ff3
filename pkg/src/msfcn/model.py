"""Declarative model configuration and the layer-graph builder.

A :class:`ModelConfig` describes one network variant (multi-scale pooling
on or off, upsampling mode, dense or plain decoder); :func:`build_model`
turns it into an executable :class:`Model` holding a validated
:class:`LayerGraph` plus an initialized :class:`ParamStore`.

The network is an encoder-decoder: fifteen 3x3 conv layers (each with
batch norm and relu) around three downsampling stages, where the first
downsample can be a multi-scale pooling block (parallel pool ratios with
1x1 compression and learnable upsampling back to the common resolution),
and the decoder either upsamples gradually or fans the bottleneck out
through parallel upsampling ratios that are concatenated per resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, InvalidArgument
from .params import ParamStore
from .tensor import Tape, Tensor

UPSAMPLE_MODES = ("bilinear", "deconv", "group_deconv")


@dataclass
class ModelConfig:
    input_size: int = 108
    classes: int = 3  # background / myocardium / cavity
    base_channels: int = 64
    encoder_pool_ratios: list[int] = field(default_factory=lambda: [2, 2, 3])
    ms_pooling: bool = True
    ms_subpath_ratios: list[int] = field(default_factory=lambda: [2, 6, 18, 36])
    ms_upsample_mode: str = "group_deconv"
    ms_group: int = 32
    ms_compression_channels: int = 32
    dense_decoder: bool = True
    dense_decoder_ratios: list[int] = field(default_factory=lambda: [3, 6])
    dropout_p: float = 0.5

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if len(self.encoder_pool_ratios) != 3:
            raise ConfigError(
                f"encoder_pool_ratios needs exactly 3 stages, got {self.encoder_pool_ratios}"
            )
        if any(r < 2 for r in self.encoder_pool_ratios):
            raise ConfigError(f"encoder pool ratios must be >= 2: {self.encoder_pool_ratios}")
        total = math.prod(self.encoder_pool_ratios)
        if self.input_size % total != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by the encoder "
                f"downsampling product {total}"
            )
        if self.ms_upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(
                f"ms_upsample_mode must be one of {UPSAMPLE_MODES}, got {self.ms_upsample_mode!r}"
            )
        if self.ms_pooling:
            ratios = self.ms_subpath_ratios
            if not ratios:
                raise ConfigError("ms_subpath_ratios must not be empty")
            if ratios[0] != self.encoder_pool_ratios[0]:
                raise ConfigError(
                    f"first subpath ratio {ratios[0]} must equal the first encoder "
                    f"pool ratio {self.encoder_pool_ratios[0]} (the baseline path)"
                )
            for r in ratios[1:]:
                if r <= ratios[0]:
                    raise ConfigError(f"subpath ratio {r} must exceed the baseline {ratios[0]}")
                if r % ratios[0] != 0:
                    raise ConfigError(
                        f"subpath ratio {r} must be a multiple of the baseline {ratios[0]} "
                        "so its output can be upsampled back to the baseline resolution"
                    )
            for r in ratios:
                if self.input_size % r != 0:
                    raise ConfigError(f"input_size {self.input_size} not divisible by subpath ratio {r}")
            if self.ms_compression_channels < 1:
                raise ConfigError("ms_compression_channels must be >= 1")
            if self.ms_upsample_mode == "group_deconv":
                if self.ms_group < 1:
                    raise ConfigError(f"ms_group must be >= 1, got {self.ms_group}")
                if self.ms_compression_channels % self.ms_group != 0:
                    raise ConfigError(
                        f"ms_compression_channels {self.ms_compression_channels} not divisible "
                        f"by ms_group {self.ms_group}"
                    )
        if self.dense_decoder:
            ratios = sorted(self.dense_decoder_ratios)
            if not ratios:
                raise ConfigError("dense_decoder_ratios must not be empty")
            bottleneck = self.input_size // total
            top = ratios[-1]
            for r in ratios[:-1]:
                if top % r != 0:
                    raise ConfigError(
                        f"dense decoder ratio {r} must divide the largest ratio {top}"
                    )
            target = bottleneck * top
            if self.input_size % target != 0:
                raise ConfigError(
                    f"dense decoder target resolution {target} must divide input_size "
                    f"{self.input_size}"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class Node:
    name: str
    op: str
    inputs: list[str]
    attrs: dict
    params: list[str]
    out_shape: tuple[int, int, int]  # (C, H, W)


class LayerGraph:
    """Ordered, shape-checked layer nodes with named skip-connection taps."""

    def __init__(self, in_shape: tuple[int, int, int]):
        self.in_shape = in_shape
        self.nodes: list[Node] = []
        self.by_name: dict[str, Node] = {}
        self.taps: dict[int, str] = {}  # resolution -> node name
        self.output: Optional[str] = None

    def add(self, node: Node) -> str:
        if node.name in self.by_name or node.name == "input":
            raise ConfigError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src != "input" and src not in self.by_name:
                raise ConfigError(f"node {node.name!r} references unknown input {src!r}")
        self.nodes.append(node)
        self.by_name[node.name] = node
        return node.name

    def shape_of(self, name: str) -> tuple[int, int, int]:
        if name == "input":
            return self.in_shape
        return self.by_name[name].out_shape


class _Builder:
    """Adds layers to a graph, registering freshly initialized parameters."""

    def __init__(self, graph: LayerGraph, store: ParamStore, rng: np.random.Generator, dtype):
        self.g = graph
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def conv(self, name, src, cout, k=3, stride=1, pad=None, groups=1) -> str:
        cin, h, w = self.g.shape_of(src)
        if pad is None:
            pad = k // 2
        if cin % groups or cout % groups:
            raise ConfigError(f"{name}: channels ({cin}->{cout}) not divisible by groups {groups}")
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{name}: conv reduces {h}x{w} below 1x1")
        fan = k * k * (cin // groups), k * k * (cout // groups)
        wt = ops.xavier_init((cout, cin // groups, k, k), fan[0], fan[1], self.rng, self.dtype)
        bt = Tensor(np.zeros(cout, dtype=self.dtype))
        self.store.add(f"{name}.weight", wt, decayed=True)
        self.store.add(f"{name}.bias", bt)
        return self.g.add(
            Node(name, "conv", [src], {"stride": stride, "pad": pad, "groups": groups, "kernel": k},
                 [f"{name}.weight", f"{name}.bias"], (cout, ho, wo))
        )

    def bn(self, name, src) -> str:
        c, h, w = self.g.shape_of(src)
        self.store.add(f"{name}.scale", Tensor(np.ones(c, dtype=self.dtype)))
        self.store.add(f"{name}.shift", Tensor(np.zeros(c, dtype=self.dtype)))
        self.store.add(f"{name}.running_mean", Tensor(np.zeros(c, dtype=self.dtype)), trainable=False)
        self.store.add(f"{name}.running_var", Tensor(np.ones(c, dtype=self.dtype)), trainable=False)
        names = [f"{name}.scale", f"{name}.shift", f"{name}.running_mean", f"{name}.running_var"]
        return self.g.add(Node(name, "bn", [src], {}, names, (c, h, w)))

    def relu(self, name, src) -> str:
        return self.g.add(Node(name, "relu", [src], {}, [], self.g.shape_of(src)))

    def conv_block(self, name, src, cout, k=3) -> str:
        """conv + batch norm + relu, the encoder/decoder workhorse."""
        c = self.conv(f"{name}.conv", src, cout, k=k)
        b = self.bn(f"{name}.bn", c)
        return self.relu(f"{name}.relu", b)

    def maxpool(self, name, src, ratio) -> str:
        c, h, w = self.g.shape_of(src)
        if h % ratio or w % ratio:
            raise ConfigError(f"{name}: size {h}x{w} not divisible by pool ratio {ratio}")
        return self.g.add(Node(name, "maxpool", [src], {"ratio": ratio}, [], (c, h // ratio, w // ratio)))

    def upsample(self, name, src, ratio, cout, mode, groups=1) -> str:
        """Learnable (deconv) or fixed (bilinear) upsampling by an integer ratio."""
        cin, h, w = self.g.shape_of(src)
        if mode == "bilinear":
            if cout != cin:
                raise ConfigError(f"{name}: bilinear upsampling cannot change channels")
            return self.g.add(Node(name, "bilinear", [src], {"ratio": ratio}, [], (cin, h * ratio, w * ratio)))
        g = groups if mode == "group_deconv" else 1
        if cin % g or cout % g:
            raise ConfigError(f"{name}: channels ({cin}->{cout}) not divisible by groups {g}")
        k, _, _ = ops.deconv_geometry(ratio)
        fan = k * k * (cin // g), k * k * (cout // g)
        wt = ops.xavier_init((cin, cout // g, k, k), fan[0], fan[1], self.rng, self.dtype)
        self.store.add(f"{name}.weight", wt, decayed=True)
        d = self.g.add(
            Node(name, "deconv", [src], {"ratio": ratio, "groups": g}, [f"{name}.weight"],
                 (cout, h * ratio, w * ratio))
        )
        b = self.bn(f"{name}.bn", d)
        return self.relu(f"{name}.relu", b)

    def concat(self, name, srcs) -> str:
        shapes = [self.g.shape_of(s) for s in srcs]
        h, w = shapes[0][1], shapes[0][2]
        for s, sh in zip(srcs, shapes):
            if sh[1] != h or sh[2] != w:
                raise ConfigError(
                    f"{name}: cannot concat {s!r} at {sh[1]}x{sh[2]} with {h}x{w} inputs"
                )
        c = sum(sh[0] for sh in shapes)
        return self.g.add(Node(name, "concat", list(srcs), {}, [], (c, h, w)))

    def dropout(self, name, src, p) -> str:
        return self.g.add(Node(name, "dropout", [src], {"p": p}, [], self.g.shape_of(src)))


def _build_ms_pooling(b: _Builder, cfg: ModelConfig, src: str) -> str:
    """Parallel pooling subpaths, each compressed by a 1x1 conv and restored
    to the baseline resolution, then concatenated."""
    base = cfg.ms_subpath_ratios[0]
    outs = []
    for idx, ratio in enumerate(cfg.ms_subpath_ratios, start=1):
        name = f"ms.path{idx}"
        pooled = b.maxpool(f"{name}.pool", src, ratio)
        compressed = b.conv_block(f"{name}.compress", pooled, cfg.ms_compression_channels, k=1)
        if ratio == base:
            outs.append(compressed)
        else:
            outs.append(
                b.upsample(f"{name}.up", compressed, ratio // base, cfg.ms_compression_channels,
                           cfg.ms_upsample_mode, groups=cfg.ms_group)
            )
    if len(outs) == 1:
        return outs[0]
    return b.concat("ms.concat", outs)


def _build_encoder(b: _Builder, cfg: ModelConfig) -> str:
    """Fifteen 3x3 conv blocks around three downsampling stages; exports a
    skip tap at each pre-downsample resolution and applies dropout at the
    bottleneck."""
    widths = [cfg.base_channels, 2 * cfg.base_channels, 4 * cfg.base_channels]
    cur = "input"
    size = cfg.input_size
    for stage, (ratio, width) in enumerate(zip(cfg.encoder_pool_ratios, widths), start=1):
        for i in range(1, 5):
            cur = b.conv_block(f"enc{stage}.block{i}", cur, width)
        b.g.taps[size] = cur
        if stage == 1 and cfg.ms_pooling:
            cur = _build_ms_pooling(b, cfg, cur)
        else:
            cur = b.maxpool(f"down{stage}", cur, ratio)
        size //= ratio
    for i in range(1, 4):
        cur = b.conv_block(f"bottleneck.block{i}", cur, widths[-1])
    return b.dropout("bottleneck.dropout", cur, cfg.dropout_p)


def _build_dense_decoder(b: _Builder, cfg: ModelConfig, bottleneck: str) -> str:
    """Fan the bottleneck out through parallel upsampling ratios, merge all
    paths (plus the encoder tap) at the largest common resolution, then one
    more upsample to full resolution and the skip tap there."""
    width = 2 * cfg.base_channels
    b_size = cfg.input_size // math.prod(cfg.encoder_pool_ratios)
    ratios = sorted(cfg.dense_decoder_ratios)
    target = b_size * ratios[-1]
    paths = []
    for idx, r in enumerate(ratios, start=1):
        up = b.upsample(f"dec.path{idx}.up", bottleneck, r, width, "deconv")
        if b_size * r != target:
            up = b.upsample(f"dec.path{idx}.align", up, target // (b_size * r), width, "deconv")
        paths.append(up)
    tap = b.g.taps.get(target)
    if tap is None:
        raise ConfigError(f"no encoder tap at the decoder merge resolution {target}")
    merged = b.concat("dec.merge", paths + [tap])
    cur = b.conv_block("dec.fuse", merged, width)
    cur = b.upsample("dec.final_up", cur, cfg.input_size // target, width, "deconv")
    full_tap = b.g.taps.get(cfg.input_size)
    if full_tap is None:
        raise ConfigError(f"no encoder tap at full resolution {cfg.input_size}")
    cur = b.concat("dec.full_merge", [cur, full_tap])
    return b.conv("dec.logits", cur, cfg.classes, k=1, pad=0)


def _build_plain_decoder(b: _Builder, cfg: ModelConfig, bottleneck: str) -> str:
    """Alternate upsampling and conv blocks, concatenating the encoder tap
    at each restored resolution."""
    width = 2 * cfg.base_channels
    size = cfg.input_size // math.prod(cfg.encoder_pool_ratios)
    cur = bottleneck
    stages = list(reversed(cfg.encoder_pool_ratios))
    for idx, r in enumerate(stages, start=1):
        cur = b.upsample(f"dec.up{idx}", cur, r, width, "deconv")
        size *= r
        tap = b.g.taps.get(size)
        if tap is None:
            raise ConfigError(f"no encoder tap at resolution {size}")
        cur = b.concat(f"dec.merge{idx}", [cur, tap])
        if idx < len(stages):
            cur = b.conv_block(f"dec.fuse{idx}", cur, width)
    return b.conv("dec.logits", cur, cfg.classes, k=1, pad=0)


class Model:
    """An executable layer graph bound to its parameter store."""

    def __init__(self, config: ModelConfig, graph: LayerGraph, store: ParamStore):
        self.config = config
        self.graph = graph
        self.store = store

    def forward(
        self,
        x: Tensor,
        mode: str = "eval",
        tape: Optional[Tape] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        if mode not in ("train", "eval"):
            raise InvalidArgument(f"unknown mode {mode!r}")
        c, h, w = self.graph.in_shape
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise InvalidArgument(
                f"model expects input (N,{c},{h},{w}), got {x.shape}"
            )
        # Free each activation after its last consumer to bound peak memory.
        last_use: dict[str, int] = {}
        for i, node in enumerate(self.graph.nodes):
            for s in node.inputs:
                last_use[s] = i
        last_use[self.graph.output] = len(self.graph.nodes)

        values: dict[str, Tensor] = {"input": x}
        for step, node in enumerate(self.graph.nodes):
            ins = [values[s] for s in node.inputs]
            if node.op == "conv":
                w_, b_ = (self.store[p] for p in node.params)
                out = ops.conv2d(ins[0], w_, b_, stride=node.attrs["stride"],
                                 pad=node.attrs["pad"], groups=node.attrs["groups"], tape=tape)
            elif node.op == "deconv":
                out = ops.deconv2d(ins[0], self.store[node.params[0]], ratio=node.attrs["ratio"],
                                   groups=node.attrs["groups"], tape=tape)
            elif node.op == "bilinear":
                out = ops.bilinear_upsample(ins[0], node.attrs["ratio"], tape=tape)
            elif node.op == "maxpool":
                out = ops.maxpool2d(ins[0], node.attrs["ratio"], tape=tape)
            elif node.op == "bn":
                sc, sh, rm, rv = (self.store[p] for p in node.params)
                out = ops.batchnorm2d(ins[0], sc, sh, mode, rm, rv, tape=tape)
            elif node.op == "relu":
                out = ops.relu(ins[0], tape=tape)
            elif node.op == "concat":
                out = ops.concat(ins, tape=tape)
            elif node.op == "dropout":
                out = ops.dropout(ins[0], node.attrs["p"], mode, rng=rng, tape=tape)
            else:
                raise InvalidArgument(f"unknown op {node.op!r} in graph")
            values[node.name] = out
            for s in node.inputs:
                if last_use.get(s) == step:
                    del values[s]
        return values[self.graph.output]

    def parameter_count(self) -> tuple[int, dict[str, int]]:
        """Total learnable scalar count plus a per-layer breakdown."""
        breakdown: dict[str, int] = {}
        total = 0
        for node in self.graph.nodes:
            n = 0
            for p in node.params:
                if self.store.entry(p).trainable:
                    n += self.store[p].size
            if n:
                breakdown[node.name] = n
                total += n
        return total, breakdown

    def describe(self) -> str:
        """Human-readable layer table: name, op, in/out shapes, param count."""
        _, breakdown = self.parameter_count()
        rows = [("name", "op", "in", "out", "params")]
        for node in self.graph.nodes:
            ins = ",".join(
                "x".join(map(str, self.graph.shape_of(s))) for s in node.inputs
            )
            out = "x".join(map(str, node.out_shape))
            rows.append((node.name, node.op, ins, out, str(breakdown.get(node.name, 0))))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
            if i == 0:
                lines.append("-" * (sum(widths) + 8))
        total, _ = self.parameter_count()
        lines.append(f"total parameters: {total}")
        return "\n".join(lines)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Validate the config, build the graph, and Xavier-initialize weights.

    Deterministic: the same seed always produces byte-identical parameters.
    """
    cfg.validate()
    graph = LayerGraph((1, cfg.input_size, cfg.input_size))
    store = ParamStore()
    rng = np.random.default_rng(seed)
    b = _Builder(graph, store, rng, dtype)
    bottleneck = _build_encoder(b, cfg)
    if cfg.dense_decoder:
        graph.output = _build_dense_decoder(b, cfg, bottleneck)
    else:
        graph.output = _build_plain_decoder(b, cfg, bottleneck)
    out = graph.shape_of(graph.output)
    if out != (cfg.classes, cfg.input_size, cfg.input_size):
        raise ConfigError(f"decoder produced {out}, expected "
                          f"({cfg.classes}, {cfg.input_size}, {cfg.input_size})")
    return Model(cfg, graph, store)


def toy_config(input_size: int = 36) -> ModelConfig:
    """A miniature variant for gradient checks and fast tests."""
    return ModelConfig(
        input_size=input_size,
        base_channels=2,
        ms_compression_channels=2,
        ms_group=2,
        dropout_p=0.0,
    )


def model_grad_check(eps: float = 1e-5, seed: int = 0, min_coords: int = 120) -> float:
    """Finite-difference check of the full network at a miniature scale."""
    from .gradcheck import grad_check

    cfg = toy_config()
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.normal(size=(1, 1, cfg.input_size, cfg.input_size)), dtype=np.float64)
    labels = rng.integers(0, cfg.classes, size=(1, cfg.input_size, cfg.input_size))
    trainable = [e.tensor for _, e in model.store.trainable()]

    def f(tape, x_, *params):
        logits = model.forward(x_, mode="train", tape=tape)
        return ops.softmax_cross_entropy(logits, labels, tape=tape)

    return grad_check(f, [x] + trainable, eps=eps, min_coords=min_coords,
                      rng=np.random.default_rng(seed + 2))
