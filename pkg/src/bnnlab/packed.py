"""Bit-packed +-1 tensors and XNOR-popcount inference.

A +-1 tensor is stored one element per bit (1 for +1, 0 for -1) in 64-bit
words, row by row along its last axis. Bit ``j`` of a row lives in word
``j // 64`` at bit position ``j % 64`` (least significant first), so the
byte stream of the little-endian words is the same as
``np.packbits(bits, bitorder="little")``. Padding bits past the row length
are always zero.

For two packed rows the +-1 dot product is ``2 * popcount(xnor(a, w)) - k``
over the ``k`` counted bits. The kernel evaluates the equivalent
``k - 2 * popcount(a ^ w)``, which needs no tail mask because zero padding
never differs. Rows can also carry a ``valid`` mask; masked positions
stand for zero-valued inputs (convolution padding) and are left out of both
the count and ``k``.

Packed model file (``.bgrp``), all integers little-endian::

    magic      4 bytes  b"BGRP"
    version    u8       1
    spec_len   u32
    spec       spec_len bytes, UTF-8 JSON of the architecture spec
    count      u32      number of tensor entries
    entries    count times:
        node       u16  node index in the graph
        kind       u8   0 = float32 array, 1 = packed +-1 bits
        name_len   u8
        name       name_len bytes ASCII (parameter or buffer name)
        ndim       u8
        shape      ndim x u32
        payload    kind 0: prod(shape) float32 values, C order
                   kind 1: ceil(prod(shape) / 8) bytes, the C-order
                           element stream as bits, least significant first

Binarized weight entries are ``kind 1``; everything else (first and last
layers, biases, batch-norm parameters and running statistics) is
``kind 0``.
"""

from __future__ import annotations

import json
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

from . import tensor as T
from .errors import FormatError, ShapeError
from .graph import (Activation, ArchSpec, Conv2d, Dense, Flatten, MaxPool, ModelGraph, Mode, Patchify, SkipAdd,
                    build_model, forward)
from .tensor import DTYPE, Rng

WORD_BITS = 64
MAGIC = b"BGRP"
VERSION = 1
KIND_F32 = 0
KIND_BITS = 1


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackedBitTensor:
    """Rows of a +-1 tensor packed into ``uint64`` words.

    ``shape`` is the logical shape; rows run along its last axis.
    ``valid`` is ``None`` (every position counts) or a word mask of the
    same shape as ``words``.
    """

    words: np.ndarray  # [rows, n_words] uint64
    shape: tuple
    valid: np.ndarray | None = None

    @property
    def row_length(self) -> int:
        return int(self.shape[-1])

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    @property
    def n_words(self) -> int:
        return self.words.shape[1]

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def counts(self) -> np.ndarray:
        """Number of counted positions per row."""
        if self.valid is None:
            return np.full(self.rows, self.row_length, dtype=np.int32)
        return _popcount_rows(self.valid)


def words_per_row(row_length: int) -> int:
    return -(-row_length // WORD_BITS)


def _bits_to_words(bits: np.ndarray) -> np.ndarray:
    """``bool[rows, k]`` to ``uint64[rows, ceil(k/64)]``, padding bits zero."""
    rows, k = bits.shape
    nw = words_per_row(k)
    packed = np.packbits(bits, axis=1, bitorder="little")
    buf = np.zeros((rows, nw * 8), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return buf.view("<u8").astype(np.uint64, copy=False).reshape(rows, nw)


def _words_to_bits(words: np.ndarray, k: int) -> np.ndarray:
    raw = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    return np.unpackbits(raw.reshape(words.shape[0], -1), axis=1, count=k, bitorder="little").astype(bool)


def _check_pm1(x: np.ndarray) -> None:
    ok = (x == 1) | (x == -1)
    if not np.all(ok):
        bad = np.asarray(x)[~ok].ravel()[:3]
        raise ValueError(f"pack expects a +-1 tensor; found {bad.tolist()}")


def pack(x: np.ndarray) -> PackedBitTensor:
    """Pack a +-1 tensor (at least 1-D) along its last axis."""
    x = np.asarray(x)
    if x.ndim == 0:
        raise ShapeError("pack needs at least one dimension")
    _check_pm1(x)
    rows = x.reshape(-1, x.shape[-1]) if x.size else np.zeros((0, x.shape[-1]))
    return PackedBitTensor(_bits_to_words(rows > 0), tuple(x.shape))


def pack_masked(x: np.ndarray, valid: np.ndarray) -> PackedBitTensor:
    """Pack ``x`` where ``valid`` holds; other positions become masked zeros."""
    x = np.asarray(x)
    if valid.shape != x.shape:
        raise ShapeError(f"mask shape {valid.shape} != tensor shape {x.shape}")
    _check_pm1(np.where(valid, x, 1))
    k = x.shape[-1]
    bits = ((x > 0) & valid).reshape(-1, k)
    return PackedBitTensor(_bits_to_words(bits), tuple(x.shape), _bits_to_words(valid.reshape(-1, k)))


def unpack(p: PackedBitTensor) -> np.ndarray:
    """Inverse of :func:`pack`; masked positions come back as 0."""
    bits = _words_to_bits(p.words, p.row_length)
    out = np.where(bits, DTYPE(1), DTYPE(-1))
    if p.valid is not None:
        out[~_words_to_bits(p.valid, p.row_length)] = 0
    return out.reshape(p.shape)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@intrinsic
def _ctpop(typingctx, x):
    """LLVM ``ctpop`` on a 64-bit word (a single POPCNT where available)."""
    if x != types.uint64:
        return None

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return types.uint64(types.uint64), codegen


@njit(cache=True, nogil=True)
def _xor_popcount_kernel(a, w, k, out):
    m, nw = a.shape
    n = w.shape[0]
    for i in range(m):
        for j in range(n):
            acc = 0
            for t in range(nw):
                acc += _ctpop(a[i, t] ^ w[j, t])
            out[i, j] = k - 2 * acc


@njit(cache=True, nogil=True)
def _xor_popcount_masked_kernel(a, valid, w, out):
    m, nw = a.shape
    n = w.shape[0]
    for i in range(m):
        count = 0
        for t in range(nw):
            count += _ctpop(valid[i, t])
        for j in range(n):
            acc = 0
            for t in range(nw):
                acc += _ctpop((a[i, t] ^ w[j, t]) & valid[i, t])
            out[i, j] = count - 2 * acc


@njit(cache=True, nogil=True)
def _popcount_rows_kernel(words, out):
    for i in range(words.shape[0]):
        acc = 0
        for t in range(words.shape[1]):
            acc += _ctpop(words[i, t])
        out[i] = acc


def _popcount_rows(words: np.ndarray) -> np.ndarray:
    out = np.empty(words.shape[0], dtype=np.int32)
    _popcount_rows_kernel(np.ascontiguousarray(words, dtype=np.uint64), out)
    return out


def xnor_popcount_matmul(a: PackedBitTensor, w: PackedBitTensor) -> np.ndarray:
    """Exact +-1 product ``a[m, k] @ w[n, k]^T`` as ``int32[m, n]``.

    ``w`` holds one output unit per row (weights stored transposed), so
    every output is a scan over two contiguous word streams.
    """
    if a.row_length != w.row_length or a.n_words != w.n_words:
        raise ShapeError(f"xnor_popcount_matmul: row lengths differ ({a.row_length} vs {w.row_length})")
    if w.valid is not None:
        raise ValueError("weights cannot carry a validity mask")
    out = np.empty((a.rows, w.rows), dtype=np.int32)
    aw = np.ascontiguousarray(a.words)
    ww = np.ascontiguousarray(w.words)
    if a.valid is None:
        _xor_popcount_kernel(aw, ww, np.int64(a.row_length), out)
    else:
        _xor_popcount_masked_kernel(aw, np.ascontiguousarray(a.valid), ww, out)
    return out


def binary_conv_rows(x: np.ndarray, kernel: int, stride: int, padding: int) -> tuple[PackedBitTensor, tuple]:
    """Pack every receptive field of a +-1 ``x[n, c, h, w]`` as one row.

    Rows are ordered ``(n, h', w')`` and each row is laid out ``(c, kh,
    kw)``, matching the flattened kernel. Zero padding is masked out.
    """
    win = T.conv_windows(x, kernel, kernel, stride, padding)  # [n, c, h', w', kh, kw]
    n, c, ho, wo = win.shape[:4]
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kernel * kernel)
    if padding:
        packed = pack_masked(patches, patches != 0)
    else:
        packed = pack(patches)
    return packed, (n, ho, wo)


def binary_conv2d(x: np.ndarray, w: PackedBitTensor, out_channels: int, kernel: int, stride: int,
                  padding: int) -> np.ndarray:
    """Integer cross-correlation of a +-1 input with packed +-1 kernels, ``int32[n, o, h', w']``."""
    rows, (n, ho, wo) = binary_conv_rows(x, kernel, stride, padding)
    out = xnor_popcount_matmul(rows, w)
    return out.reshape(n, ho, wo, out_channels).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Packed models
# ---------------------------------------------------------------------------

_SHAPE_ONLY = (Flatten, MaxPool, Patchify)


def _input_is_binary(model: ModelGraph, index: int) -> bool:
    # flatten, max-pool and patchify map +-1 tensors to +-1 tensors
    i = index - 1
    while i >= 0 and isinstance(model.nodes[i], _SHAPE_ONLY):
        i -= 1
    node = model.nodes[i] if i >= 0 else None
    return isinstance(node, Activation) and node.fn == "sign"


@dataclass(frozen=True)
class PackedModel:
    """Deployment form of a trained model.

    Binarized layers keep only their packed sign weights. ``graph`` holds
    every other parameter and buffer; its binarized ``W`` entries are
    ``None``. Arrays are read-only, so a PackedModel can be shared by
    concurrent :func:`packed_forward` callers.
    """

    spec: ArchSpec
    graph: ModelGraph
    weights: dict[int, PackedBitTensor] = field(default_factory=dict)
    binary_input: dict[int, bool] = field(default_factory=dict)

    @property
    def packed_bytes(self) -> int:
        return sum(packed_payload_size(p) for p in self.weights.values())


def packed_payload_size(p: PackedBitTensor) -> int:
    return -(-int(np.prod(p.shape)) // 8)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def _skeleton(spec: ArchSpec) -> ModelGraph:
    return build_model(spec, Rng(0))


def _kernel_matrix(node) -> np.ndarray:
    W = node.effective_weight()
    return W.reshape(W.shape[0], -1)


def export_packed(model: ModelGraph) -> PackedModel:
    """Binarize and pack the weights of every binarized layer.

    The latent float weights of those layers are not carried over. A model
    without binarized layers exports with a warning and runs fully in float.
    """
    graph = _skeleton(model.spec)
    weights: dict[int, PackedBitTensor] = {}
    binary_input: dict[int, bool] = {}
    for src, dst in zip(model.nodes, graph.nodes):
        for name, v in src.params.items():
            dst.params[name] = _freeze(v)
        for name, v in src.buffers.items():
            dst.buffers[name] = _freeze(v)
        if src.trainable and src.binarize_weights:
            weights[src.index] = pack(_kernel_matrix(src))
            binary_input[src.index] = _input_is_binary(model, src.index)
            dst.params["W"] = None
    if not weights:
        warnings.warn("model has no binarized layers; the packed model runs entirely in float", stacklevel=2)
    return PackedModel(model.spec, graph, weights, binary_input)


def _packed_node_forward(pm: PackedModel, node, x: np.ndarray) -> np.ndarray:
    packed = pm.weights[node.index]
    b = node.params["b"]
    if isinstance(node, Dense):
        rows, moved = node._to_rows(x)
        if pm.binary_input[node.index]:
            y = xnor_popcount_matmul(pack(rows), packed).astype(DTYPE)
        else:
            y = T.gemm32(rows, unpack(packed).T)
        return np.ascontiguousarray(node._from_rows(y + b, moved))
    if isinstance(node, Conv2d):
        if pm.binary_input[node.index]:
            y = binary_conv2d(x, packed, node.out_channels, node.kernel, node.stride, node.padding).astype(DTYPE)
        else:
            W = unpack(packed).reshape(node.out_channels, node.in_channels, node.kernel, node.kernel)
            y = T.conv2d(x, W, node.stride, node.padding)
        return y + b[None, :, None, None]
    raise TypeError(f"cannot run packed weights for {node!r}")


def packed_forward(pm: PackedModel, x: np.ndarray) -> np.ndarray:
    """Eval-mode logits; binarized layers with +-1 inputs use XNOR-popcount."""
    if tuple(x.shape[1:]) != pm.spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {pm.spec.input_shape}")
    graph = pm.graph
    sources = {n.source for n in graph.nodes if isinstance(n, SkipAdd)}
    outputs = {}
    h = x.astype(DTYPE, copy=False)
    for node in graph.nodes:
        if node.index in pm.weights:
            h = _packed_node_forward(pm, node, h)
        elif isinstance(node, SkipAdd):
            h, _ = node.forward(h, False, skip=outputs[node.source])
        else:
            h, _ = node.forward(h, False)
        if node.index in sources:
            outputs[node.index] = h
    return h


def float_forward(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Sign-emulated float eval forward of the latent model (the packed oracle)."""
    return forward(model, x, Mode.EVAL)[0]


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _entry(node: int, kind: int, name: str, shape: tuple, payload: bytes) -> bytes:
    name_b = name.encode("ascii")
    head = struct.pack("<HBB", node, kind, len(name_b)) + name_b
    head += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return head + payload


def packed_to_bytes(pm: PackedModel) -> bytes:
    spec = json.dumps(pm.spec.to_dict(), sort_keys=True).encode()
    entries = []
    for node in pm.graph.nodes:
        if node.index in pm.weights:
            p = pm.weights[node.index]
            shape = _weight_shape(node)
            bits = _words_to_bits(p.words, p.row_length).ravel()
            entries.append(_entry(node.index, KIND_BITS, "W", shape, np.packbits(bits, bitorder="little").tobytes()))
        for store in (node.params, node.buffers):
            for name, v in store.items():
                if v is None:
                    continue
                entries.append(_entry(node.index, KIND_F32, name, v.shape, v.astype("<f4").tobytes()))
    head = MAGIC + struct.pack("<BI", VERSION, len(spec)) + spec + struct.pack("<I", len(entries))
    return head + b"".join(entries)


def _weight_shape(node) -> tuple:
    if isinstance(node, Dense):
        return (node.out_features, node.in_features)
    return (node.out_channels, node.in_channels, node.kernel, node.kernel)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.name}: truncated {what} at byte {self.pos} "
                              f"(need {n} bytes, {len(self.raw) - self.pos} left)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def packed_from_bytes(raw: bytes, name: str = "packed model") -> PackedModel:
    r = _Reader(raw, name)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}, expected {VERSION}")
    (spec_len,) = r.unpack("<I", "spec length")
    try:
        spec = ArchSpec.from_dict(json.loads(r.take(spec_len, "spec").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{name}: unreadable architecture spec: {exc}") from exc
    graph = _skeleton(spec)
    weights: dict[int, PackedBitTensor] = {}
    (count,) = r.unpack("<I", "entry count")
    for _ in range(count):
        idx, kind, name_len = r.unpack("<HBB", "entry header")
        key = r.take(name_len, "entry name").decode("ascii")
        (ndim,) = r.unpack("<B", "entry rank")
        shape = r.unpack(f"<{ndim}I", "entry shape")
        size = int(np.prod(shape, dtype=np.int64))
        if idx >= len(graph.nodes):
            raise FormatError(f"{name}: entry for node {idx}, model has {len(graph.nodes)} nodes")
        node = graph.nodes[idx]
        if kind == KIND_BITS:
            bits = np.unpackbits(np.frombuffer(r.take(-(-size // 8), "bit payload"), np.uint8),
                                 count=size, bitorder="little").astype(bool)
            mat = bits.reshape(shape[0], -1)
            weights[idx] = PackedBitTensor(_bits_to_words(mat), mat.shape)
            node.params["W"] = None
        elif kind == KIND_F32:
            arr = np.frombuffer(r.take(4 * size, "float payload"), "<f4").astype(DTYPE).reshape(shape)
            store = node.buffers if key in node.buffers else node.params
            if key not in store:
                raise FormatError(f"{name}: node {idx} ({node.kind}) has no tensor {key!r}")
            if store[key] is not None and store[key].shape != arr.shape:
                raise FormatError(f"{name}: node {idx} {key} has shape {arr.shape}, expected {store[key].shape}")
            arr.flags.writeable = False
            store[key] = arr
        else:
            raise FormatError(f"{name}: unknown entry kind {kind} for node {idx}")
    if r.pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - r.pos} trailing bytes")
    binary_input = {i: _input_is_binary(graph, i) for i in weights}
    return PackedModel(spec, graph, weights, binary_input)


def save_packed(pm: PackedModel, path) -> int:
    data = packed_to_bytes(pm)
    Path(path).write_bytes(data)
    return len(data)


def load_packed(path) -> PackedModel:
    return packed_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark(m: int = 256, k: int = 1024, n: int = 256, repeats: int = 5, seed: int = 0) -> dict:
    """Single-thread timing of the packed kernel against float32 BLAS on the same +-1 operands."""
    from threadpoolctl import threadpool_limits

    rng = Rng(seed)
    a = np.where(rng.random((m, k)) < 0.5, DTYPE(-1), DTYPE(1))
    w = np.where(rng.random((n, k)) < 0.5, DTYPE(-1), DTYPE(1))
    pa, pw = pack(a), pack(w)
    wt = np.ascontiguousarray(w.T)
    xnor_popcount_matmul(pa, pw)  # compile outside the timed region
    with threadpool_limits(limits=1):
        t_float = _best_time(lambda: np.matmul(a, wt), repeats)
        t_packed = _best_time(lambda: xnor_popcount_matmul(pa, pw), repeats)
    return {"m": m, "k": k, "n": n, "float_seconds": t_float, "packed_seconds": t_packed,
            "speedup": t_float / t_packed}
