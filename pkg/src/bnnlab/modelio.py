"""Latent (training-time) model files.

Layout, little-endian::

    magic     4 bytes  b"BGR1"
    spec_len  u32
    spec      UTF-8 JSON of the architecture spec
    count     u32
    entries   count times:
        node      u16
        store     u8   0 = parameter, 1 = buffer
        name_len  u8
        name      ASCII
        ndim      u8
        shape     ndim x u32
        payload   prod(shape) float32 values, C order

Loading rebuilds the graph from the spec and overwrites every tensor, so
a loaded model is identical to the saved one.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .graph import ArchSpec, ModelGraph, build_model
from .tensor import DTYPE, Rng

MAGIC = b"BGR1"


def model_to_bytes(model: ModelGraph) -> bytes:
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    entries = []
    for node in model.nodes:
        for flag, store in ((0, node.params), (1, node.buffers)):
            for name, v in store.items():
                nb = name.encode("ascii")
                head = struct.pack("<HBB", node.index, flag, len(nb)) + nb
                head += struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape)
                entries.append(head + v.astype("<f4").tobytes())
    return MAGIC + struct.pack("<I", len(spec)) + spec + struct.pack("<I", len(entries)) + b"".join(entries)


def model_from_bytes(raw: bytes, name: str = "model") -> ModelGraph:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{name}: truncated {what} at byte {pos} (need {n}, have {len(raw) - pos})")
        out = raw[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{name}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (spec_len,) = struct.unpack("<I", take(4, "spec length"))
    try:
        spec = ArchSpec.from_dict(json.loads(take(spec_len, "spec").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{name}: unreadable architecture spec: {exc}") from exc
    model = build_model(spec, Rng(0))
    (count,) = struct.unpack("<I", take(4, "entry count"))
    seen = set()
    for _ in range(count):
        idx, flag, nlen = struct.unpack("<HBB", take(4, "entry header"))
        key = take(nlen, "entry name").decode("ascii")
        (ndim,) = struct.unpack("<B", take(1, "entry rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry shape"))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size, "payload"), "<f4").astype(DTYPE).reshape(shape)
        if idx >= len(model.nodes):
            raise FormatError(f"{name}: entry for node {idx}, model has {len(model.nodes)} nodes")
        store = model.nodes[idx].buffers if flag else model.nodes[idx].params
        if key not in store or store[key].shape != arr.shape:
            raise FormatError(f"{name}: node {idx} has no tensor {key!r} of shape {arr.shape}")
        store[key] = arr.copy()
        seen.add((idx, flag, key))
    expected = {(n.index, f, k) for n in model.nodes for f, s in ((0, n.params), (1, n.buffers)) for k in s}
    if seen != expected:
        raise FormatError(f"{name}: missing tensors {sorted(expected - seen)}")
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} trailing bytes")
    return model


def save_model(model: ModelGraph, path) -> int:
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes(), str(path))
