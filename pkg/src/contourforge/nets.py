"""Declarative builders for the four segmentation architectures.

Every net is a NetGraph: an ordered list of LayerDef nodes naming their
inputs explicitly, plus one runtime block per node. Convolutions are
unpadded (valid), so a 3x3 conv trims 2*dilation pixels per axis; pooling
floors odd extents; 2x2 stride-2 transpose convs double them. Under that
arithmetic a 128x128 input leaves every decoder at exactly 82x82 and the
concat nodes center-crop their skip sources by the amounts shape_trace
reports. Batch normalization follows every 3x3 convolution (the offline
BowNet variant also normalizes pool and up-conv outputs), the 1x1 output
convolution is linear, and forward() puts a sigmoid on top.

The four kinds:

- sUNet: three-level encoder/decoder, single conv per level, skip concats.
- sDeepLab: a single dilation chain (2-4-8-4-2) with no pooling, closed by
  two plain convs.
- BowNet: a two-conv stem feeding two parallel branches (encoder/decoder
  and dilation chain) joined by one final concat.
- wBowNet: the same two branches, but dilated groups repeat four times and
  the decoder concats additionally tap the dilation chain. In the online
  variant the last dilated group (CONV-D2-2) is built and counted but feeds
  nothing; the offline variant weaves it into the first up-convolution.

Default filter bases reproduce the published parameter counts exactly:
32 for sUNet/sDeepLab, 16 for BowNet/wBowNet.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, concat_crop, maxpool2d, relu, sigmoid
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    Module,
    count_params,
    memory_bytes,
)

KINDS = ("sUNet", "sDeepLab", "BowNet", "wBowNet")

# classic UNet baseline parameter count, used only as a size yardstick
UNET_REFERENCE_PARAMS = 31042369

_DEFAULT_FILTER_BASE = {"sUNet": 32, "sDeepLab": 32, "BowNet": 16, "wBowNet": 16}

_KIND_SET = {"conv", "dilated-conv", "transpose-conv", "maxpool", "concat-crop", "output-1x1"}


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str
    inputs: tuple[str, ...]
    kernels: int = 0
    kernel_size: int = 3
    dilation: int = 1
    repeat: int = 1
    batchnorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_SET:
            raise ValueError(f"unknown layer kind: {self.kind}")
        if self.dilation < 1 or self.repeat < 1:
            raise ValueError(f"bad dilation/repeat on {self.name}")
        if self.kind == "dilated-conv" and self.dilation not in (2, 4, 8):
            raise ValueError(f"dilated conv {self.name} must use dilation 2, 4, or 8")


@dataclass(frozen=True)
class NetConfig:
    kernel_size: int = 3
    filter_base: int | None = None  # per-kind default when None
    variant: str = "online"  # "offline" selects the offline-augmentation nets
    dropout_rate: float = 0.0
    dtype: type = np.float32
    seed: int = 0
    input_extent: int = 128

    def __post_init__(self):
        if self.kernel_size not in (3, 5):
            raise ValueError(f"kernel_size must be 3 or 5: {self.kernel_size}")
        if self.variant not in ("online", "offline"):
            raise ValueError(f"variant must be online or offline: {self.variant}")


# ---------------------------------------------------------------------------
# runtime blocks


class ConvBlock(Module):
    """repeat x (conv -> [batchnorm] -> relu [-> dropout])."""

    def __init__(self, cin, cout, k, dilation, repeat, batchnorm, dropout_rate, rng, dtype):
        super().__init__()
        units = []
        c = cin
        for _ in range(repeat):
            units.append(Conv2d(c, cout, k=k, dilation=dilation, rng=rng, dtype=dtype))
            if batchnorm:
                units.append(BatchNorm2d(cout, dtype=dtype))
            c = cout
        self.units = units
        self.has_bn = batchnorm
        self.drop = Dropout(dropout_rate) if dropout_rate > 0 else None

    def forward(self, x):
        i = 0
        while i < len(self.units):
            x = self.units[i](x)
            i += 1
            if self.has_bn:
                x = self.units[i](x)
                i += 1
            x = relu(x)
            if self.drop is not None:
                x = self.drop(x)
        return x


class UpBlock(Module):
    def __init__(self, cin, cout, batchnorm, rng, dtype):
        super().__init__()
        self.up = ConvTranspose2d(cin, cout, k=2, stride=2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype) if batchnorm else None

    def forward(self, x):
        x = self.up(x)
        if self.bn is not None:
            x = self.bn(x)
        return relu(x)


class PoolBlock(Module):
    def __init__(self, channels, batchnorm, dtype):
        super().__init__()
        self.bn = BatchNorm2d(channels, dtype=dtype) if batchnorm else None

    def forward(self, x):
        x = maxpool2d(x)
        return self.bn(x) if self.bn is not None else x


class ConcatBlock(Module):
    def forward(self, xs):
        return concat_crop(xs)


class OutputBlock(Module):
    """1x1 linear conv; the graph applies the sigmoid."""

    def __init__(self, cin, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, 1, k=1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(x)


# ---------------------------------------------------------------------------
# node tables


def _sunet_nodes(b, k, drop):
    conv = dict(kind="conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    return [
        LayerDef("CONV-1", inputs=("__input__",), kernels=b, **conv),
        LayerDef("POOL-1", "maxpool", ("CONV-1",)),
        LayerDef("CONV-2", inputs=("POOL-1",), kernels=2 * b, **conv),
        LayerDef("POOL-2", "maxpool", ("CONV-2",)),
        LayerDef("CONV-3", inputs=("POOL-2",), kernels=4 * b, **conv),
        LayerDef("POOL-3", "maxpool", ("CONV-3",)),
        LayerDef("CONV-4", inputs=("POOL-3",), kernels=8 * b, **conv),
        LayerDef("UP-CONV-1", "transpose-conv", ("CONV-4",), kernels=4 * b, kernel_size=2),
        LayerDef("CC-1", "concat-crop", ("UP-CONV-1", "CONV-3")),
        LayerDef("CONV-5", inputs=("CC-1",), kernels=4 * b, **conv),
        LayerDef("UP-CONV-2", "transpose-conv", ("CONV-5",), kernels=2 * b, kernel_size=2),
        LayerDef("CC-2", "concat-crop", ("UP-CONV-2", "CONV-2")),
        LayerDef("CONV-6", inputs=("CC-2",), kernels=2 * b, **conv),
        LayerDef("UP-CONV-3", "transpose-conv", ("CONV-6",), kernels=b, kernel_size=2),
        LayerDef("CC-3", "concat-crop", ("UP-CONV-3", "CONV-1")),
        LayerDef("CONV-7", inputs=("CC-3",), kernels=b, **conv),
        LayerDef("OUTPUT", "output-1x1", ("CONV-7",), kernels=1, kernel_size=1),
    ]


def _sdeeplab_nodes(b, k, drop):
    conv = dict(kind="conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    dil = dict(kind="dilated-conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    return [
        LayerDef("CONV-1", inputs=("__input__",), kernels=b, **conv),
        LayerDef("CONV-D2", inputs=("CONV-1",), kernels=2 * b, dilation=2, **dil),
        LayerDef("CONV-D4", inputs=("CONV-D2",), kernels=4 * b, dilation=4, **dil),
        LayerDef("CONV-D8", inputs=("CONV-D4",), kernels=8 * b, dilation=8, **dil),
        LayerDef("CONV-D4-2", inputs=("CONV-D8",), kernels=4 * b, dilation=4, **dil),
        LayerDef("CONV-D2-2", inputs=("CONV-D4-2",), kernels=2 * b, dilation=2, **dil),
        LayerDef("CONV-2", inputs=("CONV-D2-2",), kernels=b, **conv),
        LayerDef("CONV-3", inputs=("CONV-2",), kernels=b, **conv),
        LayerDef("OUTPUT", "output-1x1", ("CONV-3",), kernels=1, kernel_size=1),
    ]


def _bownet_nodes(b, k, drop, offline):
    conv = dict(kind="conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    dil = dict(kind="dilated-conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    # the offline variant also normalizes pool and up-conv outputs
    pool_bn = dict(batchnorm=offline)
    return [
        LayerDef("CONV-1", inputs=("__input__",), kernels=b, repeat=2, **conv),
        # encoder/decoder branch
        LayerDef("POOL-1", "maxpool", ("CONV-1",), **pool_bn),
        LayerDef("CONV-2", inputs=("POOL-1",), kernels=2 * b, **conv),
        LayerDef("POOL-2", "maxpool", ("CONV-2",), **pool_bn),
        LayerDef("CONV-3", inputs=("POOL-2",), kernels=4 * b, **conv),
        LayerDef("POOL-3", "maxpool", ("CONV-3",), **pool_bn),
        LayerDef("CONV-4", inputs=("POOL-3",), kernels=8 * b, **conv),
        LayerDef("UP-CONV-1", "transpose-conv", ("CONV-4",), kernels=4 * b, kernel_size=2, **pool_bn),
        LayerDef("CC-1", "concat-crop", ("UP-CONV-1", "CONV-3")),
        LayerDef("CONV-5", inputs=("CC-1",), kernels=4 * b, **conv),
        LayerDef("UP-CONV-2", "transpose-conv", ("CONV-5",), kernels=2 * b, kernel_size=2, **pool_bn),
        LayerDef("CC-2", "concat-crop", ("UP-CONV-2", "CONV-2")),
        LayerDef("CONV-6", inputs=("CC-2",), kernels=2 * b, **conv),
        LayerDef("UP-CONV-3", "transpose-conv", ("CONV-6",), kernels=b, kernel_size=2, **pool_bn),
        LayerDef("CC-3", "concat-crop", ("UP-CONV-3", "CONV-1")),
        LayerDef("CONV-7", inputs=("CC-3",), kernels=b, **conv),
        # dilation branch off the shared stem
        LayerDef("CONV-D2", inputs=("CONV-1",), kernels=2 * b, dilation=2, **dil),
        LayerDef("CONV-D4", inputs=("CONV-D2",), kernels=4 * b, dilation=4, **dil),
        LayerDef("CONV-D8", inputs=("CONV-D4",), kernels=8 * b, dilation=8, **dil),
        LayerDef("CONV-D4-2", inputs=("CONV-D8",), kernels=4 * b, dilation=4, **dil),
        LayerDef("CONV-D2-2", inputs=("CONV-D4-2",), kernels=2 * b, dilation=2, **dil),
        LayerDef("CONV-8", inputs=("CONV-D2-2",), kernels=b, **conv),
        # the single join of the two branches
        LayerDef("CC-4", "concat-crop", ("CONV-7", "CONV-8")),
        LayerDef("OUTPUT", "output-1x1", ("CC-4",), kernels=1, kernel_size=1),
    ]


def _wbownet_nodes(b, k, drop, offline):
    conv = dict(kind="conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    dil = dict(kind="dilated-conv", kernel_size=k, batchnorm=True, dropout_rate=drop)
    nodes = [
        LayerDef("CONV-1", inputs=("__input__",), kernels=b, repeat=2, **conv),
        LayerDef("POOL-1", "maxpool", ("CONV-1",)),
        LayerDef("CONV-2", inputs=("POOL-1",), kernels=2 * b, **conv),
        LayerDef("POOL-2", "maxpool", ("CONV-2",)),
        LayerDef("CONV-3", inputs=("POOL-2",), kernels=4 * b, **conv),
        LayerDef("POOL-3", "maxpool", ("CONV-3",)),
        LayerDef("CONV-4", inputs=("POOL-3",), kernels=8 * b, **conv),
        # dilation branch: fourfold groups rising 2-4-8 and falling 4-2
        LayerDef("CONV-D2", inputs=("CONV-1",), kernels=2 * b, dilation=2, repeat=4, **dil),
        LayerDef("CONV-D4", inputs=("CONV-D2",), kernels=4 * b, dilation=4, repeat=4, **dil),
        LayerDef("CONV-D8", inputs=("CONV-D4",), kernels=8 * b, dilation=8, **dil),
        LayerDef("CONV-D4-2", inputs=("CONV-D8",), kernels=4 * b, dilation=4, repeat=4, **dil),
        LayerDef("CONV-D2-2", inputs=("CONV-D4-2",), kernels=2 * b, dilation=2, repeat=4, **dil),
    ]
    if offline:
        nodes += [
            LayerDef("CC-0", "concat-crop", ("CONV-4", "CONV-D2-2")),
            LayerDef("UP-CONV-1", "transpose-conv", ("CC-0",), kernels=4 * b, kernel_size=2),
        ]
    else:
        # online variant: CONV-D2-2 stays an unconsumed tap; the first
        # up-conv reads the bottleneck alone
        nodes += [
            LayerDef("UP-CONV-1", "transpose-conv", ("CONV-4",), kernels=4 * b, kernel_size=2),
        ]
    nodes += [
        LayerDef("CC-1", "concat-crop", ("UP-CONV-1", "CONV-3", "CONV-D4-2")),
        LayerDef("CONV-5", inputs=("CC-1",), kernels=4 * b, **conv),
        LayerDef("UP-CONV-2", "transpose-conv", ("CONV-5",), kernels=2 * b, kernel_size=2),
        LayerDef("CC-2", "concat-crop", ("UP-CONV-2", "CONV-2", "CONV-D8")),
        LayerDef("CONV-6", inputs=("CC-2",), kernels=2 * b, **conv),
        LayerDef("UP-CONV-3", "transpose-conv", ("CONV-6",), kernels=b, kernel_size=2),
        LayerDef("CC-3", "concat-crop", ("UP-CONV-3", "CONV-1", "CONV-D2")),
        LayerDef("CONV-7", inputs=("CC-3",), kernels=b, **conv),
        LayerDef("OUTPUT", "output-1x1", ("CONV-7",), kernels=1, kernel_size=1),
    ]
    return nodes


def _make_nodes(kind, cfg: NetConfig):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind: {kind!r} (expected one of {KINDS})")
    b = cfg.filter_base if cfg.filter_base is not None else _DEFAULT_FILTER_BASE[kind]
    k, drop = cfg.kernel_size, cfg.dropout_rate
    offline = cfg.variant == "offline"
    if kind == "sUNet":
        return _sunet_nodes(b, k, drop)
    if kind == "sDeepLab":
        return _sdeeplab_nodes(b, k, drop)
    if kind == "BowNet":
        return _bownet_nodes(b, k, drop, offline)
    return _wbownet_nodes(b, k, drop, offline)


# ---------------------------------------------------------------------------
# graph


def _attr_name(node_name: str) -> str:
    return re.sub(r"[^0-9a-zA-Z]+", "_", node_name).strip("_").lower()


class NetGraph(Module):
    def __init__(self, kind: str, nodes, config: NetConfig):
        super().__init__()
        self.kind = kind
        self.config = config
        self.nodes = list(nodes)
        self._by_name = {n.name: n for n in self.nodes}
        if len(self._by_name) != len(self.nodes):
            raise ValueError("duplicate node names")
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        channels = {"__input__": 1}
        self._attr = {}
        for nd in self.nodes:
            for s in nd.inputs:
                if s not in channels:
                    raise ValueError(f"node {nd.name} references {s} before its definition")
            if nd.kind == "concat-crop":
                cin = sum(channels[s] for s in nd.inputs)
                block = ConcatBlock()
                cout = cin
            else:
                cin = channels[nd.inputs[0]]
                if nd.kind in ("conv", "dilated-conv"):
                    block = ConvBlock(cin, nd.kernels, nd.kernel_size, nd.dilation,
                                      nd.repeat, nd.batchnorm, nd.dropout_rate, rng, dtype)
                    cout = nd.kernels
                elif nd.kind == "transpose-conv":
                    block = UpBlock(cin, nd.kernels, nd.batchnorm, rng, dtype)
                    cout = nd.kernels
                elif nd.kind == "maxpool":
                    block = PoolBlock(cin, nd.batchnorm, dtype)
                    cout = cin
                else:  # output-1x1
                    block = OutputBlock(cin, rng, dtype)
                    cout = 1
            channels[nd.name] = cout
            attr = _attr_name(nd.name)
            setattr(self, attr, block)
            self._attr[nd.name] = attr
        self.channels = channels
        # nodes the output actually depends on; unreferenced branches are
        # never evaluated
        live = set()
        stack = [self.nodes[-1].name]
        while stack:
            nm = stack.pop()
            if nm in live or nm == "__input__":
                continue
            live.add(nm)
            stack.extend(self._by_name[nm].inputs)
        self._live = live
        self.output_extent = None  # filled by build() after tracing

    @property
    def input_extent(self) -> int:
        return self.config.input_extent

    def block(self, node_name: str) -> Module:
        return getattr(self, self._attr[node_name])

    def node_param_counts(self) -> dict:
        return {nd.name: count_params(self.block(nd.name)) for nd in self.nodes}

    def set_dropout_rng(self, rng: np.random.Generator):
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng
        return self

    def _run(self, x, with_sigmoid: bool):
        x = x if isinstance(x, Tensor) else Tensor(x)
        e = self.config.input_extent
        if x.data.ndim != 4 or x.data.shape[1] != 1 or x.data.shape[2:] != (e, e):
            raise ValueError(f"expected input (N, 1, {e}, {e}), got {x.data.shape}")
        # plain loop, not a recursive closure: a self-referencing closure
        # forms a cycle that keeps every cached activation alive until a
        # full GC pass, which big-array workloads rarely trigger
        cache = {"__input__": x}
        for nd in self.nodes:
            if nd.name not in self._live:
                continue
            srcs = [cache[s] for s in nd.inputs]
            blk = self.block(nd.name)
            cache[nd.name] = blk(srcs) if nd.kind == "concat-crop" else blk(srcs[0])
        out = cache[self.nodes[-1].name]
        return sigmoid(out) if with_sigmoid else out

    def forward(self, x):
        return self._run(x, with_sigmoid=True)

    def forward_logits(self, x):
        return self._run(x, with_sigmoid=False)


def forward(net: NetGraph, batch):
    """Probability maps in (0, 1): sigmoid over the 1x1 output conv."""
    return net._run(batch, with_sigmoid=True)


def forward_logits(net: NetGraph, batch):
    """Raw output-conv values; pair with bce_from_logits for training."""
    return net._run(batch, with_sigmoid=False)


def build(kind: str, config: NetConfig | None = None) -> NetGraph:
    cfg = config if config is not None else NetConfig()
    net = NetGraph(kind, _make_nodes(kind, cfg), cfg)
    trace = shape_trace(net, cfg.input_extent)  # raises on non-positive extents
    net.output_extent = trace.entries[-1].h
    return net


def init_params(net: NetGraph, seed: int) -> NetGraph:
    """Redraw every parameter from the He scheme in traversal order; the
    same seed always produces bitwise-identical weights (and matches what
    build() draws for that seed)."""
    rng = np.random.default_rng(seed)
    for m in net.modules():
        if isinstance(m, Conv2d):
            cout, cin, kh, kw = m.w.data.shape
            std = np.sqrt(2.0 / (cin * kh * kw))
            m.w.data = rng.normal(0.0, std, m.w.data.shape).astype(m.w.data.dtype)
            if m.b is not None:
                m.b.data[:] = 0.0
        elif isinstance(m, ConvTranspose2d):
            cin, cout, kh, kw = m.w.data.shape
            std = np.sqrt(2.0 / (cin * kh * kw))
            m.w.data = rng.normal(0.0, std, m.w.data.shape).astype(m.w.data.dtype)
            if m.b is not None:
                m.b.data[:] = 0.0
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[:] = 1.0
            m.beta.data[:] = 0.0
            m.running_mean[:] = 0.0
            m.running_var[:] = 1.0
    return net


# ---------------------------------------------------------------------------
# shape tracing


@dataclass
class TraceEntry:
    name: str
    kind: str
    channels: int
    h: int
    w: int
    inputs: tuple
    crops: dict = field(default_factory=dict)  # source -> (rows trimmed, cols trimmed)


@dataclass
class ShapeTrace:
    kind: str
    input_extent: int
    entries: list

    def __str__(self):
        lines = [f"{self.kind} @ {self.input_extent}x{self.input_extent}"]
        for e in self.entries:
            row = f"  {e.name:<12} {e.kind:<14} {e.channels:>4} x {e.h:>3} x {e.w:>3}"
            if e.crops:
                trims = ", ".join(f"{s} -{dh}/-{dw}" for s, (dh, dw) in e.crops.items())
                row += f"   crop: {trims}"
            lines.append(row)
        return "\n".join(lines)


def shape_trace(net: NetGraph, input_extent: int | None = None) -> ShapeTrace:
    """Walk every node (consumed or not) and report (C, H, W) plus concat
    crop amounts. Raises ValueError as soon as any extent drops below 1."""
    e = input_extent if input_extent is not None else net.config.input_extent
    extents = {"__input__": (e, e)}
    entries = []
    for nd in net.nodes:
        hw = [extents[s] for s in nd.inputs]
        crops = {}
        if nd.kind in ("conv", "dilated-conv", "output-1x1"):
            h, w = hw[0]
            loss = nd.dilation * (nd.kernel_size - 1) * nd.repeat
            h, w = h - loss, w - loss
        elif nd.kind == "maxpool":
            h, w = hw[0][0] // 2, hw[0][1] // 2
        elif nd.kind == "transpose-conv":
            h, w = 2 * hw[0][0], 2 * hw[0][1]
        else:  # concat-crop
            h = min(p[0] for p in hw)
            w = min(p[1] for p in hw)
            crops = {s: (p[0] - h, p[1] - w) for s, p in zip(nd.inputs, hw)}
        if h < 1 or w < 1:
            raise ValueError(
                f"{net.kind}: node {nd.name} reaches non-positive extent {h}x{w} "
                f"for input {e}x{e}"
            )
        extents[nd.name] = (h, w)
        entries.append(TraceEntry(nd.name, nd.kind, net.channels[nd.name], h, w, nd.inputs, crops))
    return ShapeTrace(net.kind, e, entries)
