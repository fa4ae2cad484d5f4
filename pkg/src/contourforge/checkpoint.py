"""Binary checkpoint format.

Layout: magic "CFRG", format version (u32 LE), model-kind tag, a layer
table of (name, shape) entries covering trainable parameters followed by
batch-norm running buffers, then the payloads as little-endian float32 in
table order.  Writing is deterministic: identical nets produce identical
bytes.

Loading rebuilds the network from the table alone: the stem convolution
fixes filter base and kernel size; the presence of pool-side batch norm
(BowNet) or a widened first up-convolution (wBowNet) fixes the variant.
The rebuilt net's table must match the stored one exactly, and the file
must contain exactly the payload bytes the table promises; anything else
is an error, never a partial load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nets import KINDS, NetConfig, NetGraph, build

MAGIC = b"CFRG"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "read_header"]


def _entries(net: NetGraph):
    out = [(name, t.data) for name, t in net.named_parameters()]
    out += [(name, buf) for name, buf in net.named_buffers()]
    return out


def save_checkpoint(net: NetGraph, path) -> None:
    """Write the net's parameters and buffers to ``path``."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    kind_b = net.kind.encode("utf-8")
    chunks.append(struct.pack("<I", len(kind_b)))
    chunks.append(kind_b)
    entries = _entries(net)
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in entries:
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated checkpoint: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _parse_table(r: _Reader):
    kind = r.text()
    table = []
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        table.append((name, tuple(int(d) for d in shape)))
    return kind, table


def _open(path) -> _Reader:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    return r


def read_header(path):
    """(model kind, layer table) without loading payloads."""
    return _parse_table(_open(path))


def _infer_config(kind: str, table, input_extent: int) -> NetConfig:
    # the stem conv weight comes first by construction: (cout, cin, k, k)
    name, shape = table[0]
    if len(shape) != 4:
        raise ValueError(f"malformed layer table: first entry {name} has shape {shape}")
    base, ksize = int(shape[0]), int(shape[2])
    variant = "online"
    if kind == "BowNet" and any(n.startswith("pool_1.") for n, _ in table):
        variant = "offline"
    if kind == "wBowNet":
        for n, s in table:
            if n.startswith("up_conv_1.") and len(s) == 4:
                # transpose weight is (cin, cout, k, k); the offline weave
                # widens its input from 8x to 10x the filter base
                variant = "offline" if s[0] == 10 * base else "online"
                break
    return NetConfig(
        kernel_size=ksize, filter_base=base, variant=variant, input_extent=input_extent
    )


def load_checkpoint(path, input_extent: int = 128, expect_kind: str | None = None) -> NetGraph:
    """Rebuild the stored network and load its weights. Returns the net in
    eval mode. ``expect_kind`` guards against feeding a checkpoint of one
    architecture where another is required."""
    r = _open(path)
    kind, table = _parse_table(r)
    if kind not in KINDS:
        raise ValueError(f"checkpoint names unknown model kind '{kind}'")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"checkpoint holds {kind}, expected {expect_kind}")
    net = build(kind, _infer_config(kind, table, input_extent))
    expected = _entries(net)
    if len(expected) != len(table):
        raise ValueError(
            f"layer table mismatch: {len(table)} stored vs {len(expected)} expected"
        )
    for (sname, sshape), (ename, earr) in zip(table, expected):
        if sname != ename or sshape != tuple(earr.shape):
            raise ValueError(
                f"layer table mismatch at '{sname}' {sshape}: expected '{ename}' {tuple(earr.shape)}"
            )
    for _, arr in expected:
        raw = r.take(4 * arr.size)
        arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    if r.pos != len(r.data):
        raise ValueError(f"trailing data after payloads in {path}")
    return net.eval()
