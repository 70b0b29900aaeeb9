"""Layer graph, forward execution and per-segment backward passes.

A model is a topologically ordered list of nodes. Every Dense/Conv2d node
except the first starts a new *segment*; the node right before it (the last
operation executed before the next trainable layer, usually an activation)
is an *injection point*, the place where training algorithms deliver their
learning signal. The network output is the final injection point, so a
model with K trainable layers has K segments, indexed 0..K-1 here.

Backward passes are hand-written per node. ``segment_backward`` walks one
segment in reverse and stops at the segment input, which is what every
algorithm in :mod:`bnnlab.algorithms` builds on; backpropagation chains it.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from numba import njit

from . import tensor as T
from .binarize import ACTIVATION_STE, SteKind, binarize_weights, sign_forward, ste_backward, weight_grad_to_latent
from .errors import ConfigError, ShapeError, TraceError
from .tensor import DTYPE, Rng


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class RetentionPolicy(enum.Enum):
    ALL = "all"  # keep every segment's buffers until released by the caller
    SEGMENT = "segment"  # keep only the segment currently being trained
    NONE = "none"  # inference: keep nothing, allocate no trace


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------


class Node:
    kind = "node"
    trainable = False

    def __init__(self):
        self.index = -1
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.binarize_weights = False

    def forward(self, x: np.ndarray, train: bool, track_stats: bool = True):
        """Return ``(y, cache)``; ``cache`` holds what ``backward`` needs."""
        raise NotImplementedError

    def backward(self, g: np.ndarray, cache: dict, ste_log: list | None = None):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def config(self) -> dict:
        return {}

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}#{self.index}({cfg})"


def _feature_index(axis: int, shape: tuple) -> int:
    # ``axis`` counts the batch dimension, per-sample ``shape`` does not
    return axis - 1 if axis > 0 else axis % len(shape)


def _uniform_init(rng: Rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return T.rng_uniform(rng, shape, -bound, bound)


class Dense(Node):
    """Affine map over one axis: ``y = x W^T + b`` with ``W[out, in]``.

    ``axis=-1`` is the usual fully connected layer; ``axis=1`` on a
    ``[n, tokens, channels]`` tensor mixes across tokens.
    """

    kind = "dense"
    trainable = True

    def __init__(self, in_features: int, out_features: int, rng: Rng, axis: int = -1, binarize: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.axis = axis
        self.binarize_weights = binarize
        self.params["W"] = _uniform_init(rng, (out_features, in_features), in_features, out_features)
        self.params["b"] = np.zeros(out_features, dtype=DTYPE)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features, "axis": self.axis}

    def effective_weight(self) -> np.ndarray:
        W = self.params["W"]
        return binarize_weights(W) if self.binarize_weights else W

    def output_shape(self, shape):
        ax = _feature_index(self.axis, shape)
        if shape[ax] != self.in_features:
            raise ShapeError(f"{self!r}: expected {self.in_features} features on axis {self.axis}, got {shape}")
        return shape[:ax] + (self.out_features,) + shape[ax + 1 :]

    def _to_rows(self, x):
        moved = np.moveaxis(x, self.axis, -1)
        return moved.reshape(-1, moved.shape[-1]), moved.shape

    def _from_rows(self, rows, moved_shape):
        return np.moveaxis(rows.reshape(moved_shape[:-1] + (rows.shape[-1],)), -1, self.axis)

    def forward(self, x, train, track_stats=True):
        if x.shape[self.axis] != self.in_features:
            raise ShapeError(f"{self!r}: input {x.shape} has {x.shape[self.axis]} features on axis {self.axis}")
        rows, moved = self._to_rows(x)
        y = T.gemm32(rows, self.effective_weight().T) + self.params["b"]
        return np.ascontiguousarray(self._from_rows(y, moved)), {"x": x}

    def backward(self, g, cache, ste_log=None, need_input=True):
        x = cache["x"]
        xr, _ = self._to_rows(x)
        gr, moved = self._to_rows(g)
        Wb = self.effective_weight()
        dW = T.gemm32(gr.T, xr)
        if self.binarize_weights:
            dW = weight_grad_to_latent(dW, self.params["W"])
        db = gr.sum(axis=0, dtype=np.float64).astype(DTYPE)
        grads = {"W": dW, "b": db}
        if not need_input:
            return None, grads
        dx = self._from_rows(T.gemm32(gr, Wb), moved[:-1] + (self.in_features,))
        return np.ascontiguousarray(dx), grads


class Conv2d(Node):
    kind = "conv2d"
    trainable = True

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: Rng, stride: int = 1,
                 padding: int = 0, binarize: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.binarize_weights = binarize
        fan_in, fan_out = in_channels * kernel * kernel, out_channels * kernel * kernel
        self.params["W"] = _uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out)
        self.params["b"] = np.zeros(out_channels, dtype=DTYPE)

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def effective_weight(self):
        W = self.params["W"]
        return binarize_weights(W) if self.binarize_weights else W

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"{self!r}: bad input shape {shape}")
        _, h, w = shape
        ho = T.conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = T.conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r}: input {shape} too small")
        return (self.out_channels, ho, wo)

    def forward(self, x, train, track_stats=True):
        y = T.conv2d(x, self.effective_weight(), self.stride, self.padding)
        y += self.params["b"][None, :, None, None]
        return y, {"x": x}

    def backward(self, g, cache, ste_log=None, need_input=True):
        x = cache["x"]
        Wb = self.effective_weight()
        dW = T.conv2d_grad_weight(x, g, Wb.shape, self.stride, self.padding)
        if self.binarize_weights:
            dW = weight_grad_to_latent(dW, self.params["W"])
        db = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        if not need_input:
            return None, {"W": dW, "b": db}
        dx = T.conv2d_grad_input(g, Wb, x.shape, self.stride, self.padding)
        return dx, {"W": dW, "b": db}


class Activation(Node):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("tanh", "relu", "sign"):
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn
        self.ste = ACTIVATION_STE if fn == "sign" else None

    def config(self):
        return {"fn": self.fn}

    def forward(self, x, train, track_stats=True):
        if self.fn == "tanh":
            y = np.tanh(x)
            return y, {"y": y}
        if self.fn == "relu":
            return T.relu(x), {"z": x}
        return sign_forward(x), {"z": x}

    def backward(self, g, cache, ste_log=None):
        if self.fn == "tanh":
            y = cache["y"]
            return (g * (1 - y * y)).astype(DTYPE), {}
        z = cache["z"]
        if self.fn == "relu":
            return np.multiply(g, z > 0, dtype=DTYPE), {}
        if ste_log is not None:
            ste_log.append(self.index)
        return ste_backward(self.ste, g, z), {}


class BatchNorm(Node):
    """Batch normalization over every axis except ``axis``."""

    kind = "batchnorm"
    trainable = False  # has parameters, but does not start a segment
    eps = 1e-5
    momentum = 0.1

    def __init__(self, features: int, axis: int = 1):
        super().__init__()
        self.features = features
        self.axis = axis
        self.params["gamma"] = np.ones(features, dtype=DTYPE)
        self.params["beta"] = np.zeros(features, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(features, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(features, dtype=DTYPE)

    def config(self):
        return {"features": self.features, "axis": self.axis}

    def output_shape(self, shape):
        if shape[_feature_index(self.axis, shape)] != self.features:
            raise ShapeError(f"{self!r}: expected {self.features} features, got {shape}")
        return shape

    def _bshape(self, x):
        s = [1] * x.ndim
        s[self.axis % x.ndim] = self.features
        return tuple(s)

    def _reduce_axes(self, x):
        ax = self.axis % x.ndim
        return tuple(i for i in range(x.ndim) if i != ax)

    def _rows(self, x):
        # features on the last axis: view as [rows, features] for the compiled kernels
        if self.axis % x.ndim == x.ndim - 1 and x.flags.c_contiguous and x.dtype == DTYPE:
            return x.reshape(-1, self.features)
        return None

    def forward(self, x, train, track_stats=True):
        bs = self._bshape(x)
        axes = self._reduce_axes(x)
        rows = self._rows(x)
        if train and rows is not None:
            mean, var = _bn_stats(rows)
        elif train:
            x64 = x.astype(np.float64)
            mean = x64.mean(axis=axes)
            var = x64.var(axis=axes)
        if train:
            if track_stats:
                count = x.size // self.features
                unbiased = var * count / max(count - 1, 1)
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm[...] = (1 - self.momentum) * rm + self.momentum * mean
                rv[...] = (1 - self.momentum) * rv + self.momentum * unbiased
            mean, var = mean.astype(DTYPE), var.astype(DTYPE)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + DTYPE(self.eps))).astype(DTYPE)
        if rows is not None:
            xhat, y = _bn_apply(rows, mean, inv_std, self.params["gamma"], self.params["beta"])
            return y.reshape(x.shape), {"xhat": xhat.reshape(x.shape), "inv_std": inv_std, "train": train}
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        y = xhat * self.params["gamma"].reshape(bs) + self.params["beta"].reshape(bs)
        return y.astype(DTYPE), {"xhat": xhat, "inv_std": inv_std, "train": train}

    def backward(self, g, cache, ste_log=None):
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        rows = self._rows(g)
        if rows is not None:
            dx, dgamma, dbeta = _bn_backward(rows, xhat.reshape(rows.shape), self.params["gamma"], inv_std,
                                             cache["train"])
            return dx.reshape(g.shape), {"gamma": dgamma, "beta": dbeta}
        bs = self._bshape(g)
        axes = self._reduce_axes(g)
        g64 = g.astype(np.float64)
        dbeta = g64.sum(axis=axes)
        dgamma = (g64 * xhat).sum(axis=axes)
        scale = (self.params["gamma"] * inv_std).reshape(bs).astype(np.float64)
        if cache["train"]:
            n = g.size // self.features
            dx = scale / n * (n * g64 - dbeta.reshape(bs) - xhat * dgamma.reshape(bs))
        else:
            dx = scale * g64
        return dx.astype(DTYPE), {"gamma": dgamma.astype(DTYPE), "beta": dbeta.astype(DTYPE)}


@njit(cache=True, nogil=True)
def _bn_stats(x):
    # float64 per-feature mean and (biased) variance, two passes
    n, f = x.shape
    mean = np.zeros(f)
    var = np.zeros(f)
    for i in range(n):
        for j in range(f):
            mean[j] += x[i, j]
    mean /= n
    for i in range(n):
        for j in range(f):
            d = x[i, j] - mean[j]
            var[j] += d * d
    var /= n
    return mean, var


@njit(cache=True, nogil=True)
def _bn_apply(x, mean, inv_std, gamma, beta):
    n, f = x.shape
    m32 = mean.astype(np.float32)
    xhat = np.empty_like(x)
    y = np.empty_like(x)
    for i in range(n):
        for j in range(f):
            h = (x[i, j] - m32[j]) * inv_std[j]
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return xhat, y


@njit(cache=True, nogil=True)
def _bn_backward(g, xhat, gamma, inv_std, train):
    n, f = g.shape
    dbeta = np.zeros(f)
    dgamma = np.zeros(f)
    for i in range(n):
        for j in range(f):
            dbeta[j] += g[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
    dx = np.empty_like(g)
    for i in range(n):
        for j in range(f):
            scale = np.float64(gamma[j]) * inv_std[j]
            if train:
                dx[i, j] = scale / n * (n * np.float64(g[i, j]) - dbeta[j] - xhat[i, j] * dgamma[j])
            else:
                dx[i, j] = scale * g[i, j]
    return dx, dgamma.astype(np.float32), dbeta.astype(np.float32)


class MaxPool(Node):
    """Non-overlapping 2-D max pooling; backward routes to the first argmax."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def config(self):
        return {"size": self.size}

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"{self!r}: input {shape} smaller than pool")
        return (c, h // self.size, w // self.size)

    def _blocks(self, x):
        n, c, h, w = x.shape
        s = self.size
        h2, w2 = h // s, w // s
        xb = x[:, :, : h2 * s, : w2 * s].reshape(n, c, h2, s, w2, s)
        return xb.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, s * s)

    def forward(self, x, train, track_stats=True):
        blocks = self._blocks(x)
        arg = blocks.argmax(axis=-1).astype(np.int8)
        y = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
        return np.ascontiguousarray(y), {"arg": arg, "shape": x.shape}

    def backward(self, g, cache, ste_log=None):
        n, c, h, w = cache["shape"]
        s = self.size
        h2, w2 = g.shape[2], g.shape[3]
        blocks = np.zeros((n, c, h2, w2, s * s), dtype=DTYPE)
        np.put_along_axis(blocks, cache["arg"][..., None].astype(np.intp), g[..., None], axis=-1)
        dx = np.zeros((n, c, h, w), dtype=DTYPE)
        dx[:, :, : h2 * s, : w2 * s] = (
            blocks.reshape(n, c, h2, w2, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * s, w2 * s)
        )
        return dx, {}


class AvgPool(Node):
    """Global mean over ``axes`` (batch axis excluded), which are removed."""

    kind = "avgpool"

    def __init__(self, axes: tuple[int, ...]):
        super().__init__()
        self.axes = tuple(axes)

    def config(self):
        return {"axes": list(self.axes)}

    def output_shape(self, shape):
        return tuple(s for i, s in enumerate(shape, start=1) if i not in self.axes)

    def forward(self, x, train, track_stats=True):
        y = x.mean(axis=self.axes, dtype=np.float64).astype(DTYPE)
        return y, {"shape": x.shape}

    def backward(self, g, cache, ste_log=None):
        shape = cache["shape"]
        count = int(np.prod([shape[a] for a in self.axes]))
        gx = np.expand_dims(g, self.axes) / DTYPE(count)
        return np.broadcast_to(gx, shape).astype(DTYPE), {}


class Flatten(Node):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train, track_stats=True):
        return x.reshape(x.shape[0], -1), {"shape": x.shape}

    def backward(self, g, cache, ste_log=None):
        return g.reshape(cache["shape"]), {}


class Patchify(Node):
    """``[n, c, H, W] -> [n, (H/p)*(W/p), c*p*p]`` non-overlapping patches."""

    kind = "patchify"

    def __init__(self, patch: int):
        super().__init__()
        self.patch = patch

    def config(self):
        return {"patch": self.patch}

    def output_shape(self, shape):
        c, h, w = shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"{self!r}: image {h}x{w} not divisible by patch {p}")
        return ((h // p) * (w // p), c * p * p)

    def forward(self, x, train, track_stats=True):
        n, c, h, w = x.shape
        p = self.patch
        y = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(y.reshape(n, (h // p) * (w // p), c * p * p)), {"shape": x.shape}

    def backward(self, g, cache, ste_log=None):
        n, c, h, w = cache["shape"]
        p = self.patch
        dx = g.reshape(n, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return np.ascontiguousarray(dx.reshape(n, c, h, w)), {}


class SkipAdd(Node):
    """Adds the output of node ``source`` to the incoming tensor (always in float)."""

    kind = "skipadd"

    def __init__(self, source: int):
        super().__init__()
        self.source = source

    def config(self):
        return {"source": self.source}

    def forward(self, x, train, track_stats=True, skip=None):
        if skip is None or skip.shape != x.shape:
            raise ShapeError(f"{self!r}: skip operand {None if skip is None else skip.shape} vs {x.shape}")
        return (x + skip).astype(DTYPE), {}

    def backward(self, g, cache, ste_log=None):
        return g, {}


NODE_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, Activation, BatchNorm, MaxPool, AvgPool, Flatten, Patchify, SkipAdd)}


# ---------------------------------------------------------------------------
# Architecture specification and model graph
# ---------------------------------------------------------------------------

ARCHITECTURES = ("mlp_plain", "mlp_residual", "conv_plain", "mini_mixer")


@dataclass
class ArchSpec:
    arch: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = (512, 512, 512)
    binarize_weights: bool = False
    binary_activations: bool = False
    skip_connections: bool = True
    activation: str | None = None  # overrides the default hidden activation
    patch: int = 4  # mini_mixer patch side
    kernel: int = 3  # conv_plain kernel side

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)

    def hidden_activation(self) -> str:
        if self.activation is not None:
            return self.activation
        if self.binary_activations:
            return "sign"
        return "tanh" if self.binarize_weights else "relu"


@dataclass
class ModelGraph:
    nodes: list[Node]
    injection_points: list[int]
    spec: ArchSpec
    segment_starts: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.injection_points)

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def segment_nodes(self, k: int) -> range:
        start = 0 if k == 0 else self.injection_points[k - 1] + 1
        return range(start, self.injection_points[k] + 1)

    def segment_of(self, node_index: int) -> int:
        for k, ip in enumerate(self.injection_points):
            if node_index <= ip:
                return k
        raise IndexError(node_index)

    def trainable_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    def segment_output_shape(self, k: int) -> tuple:
        return self.shapes[self.injection_points[k]]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n.index}.{name}": p for n in self.nodes for name, p in n.params.items()}

    def segment_parameters(self, k: int) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": p for i in self.segment_nodes(k) for name, p in self.nodes[i].params.items()}

    def param_segment(self, key: str) -> int:
        return self.segment_of(int(key.split(".", 1)[0]))

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        shape = self.spec.input_shape
        self.shapes: list[tuple] = []
        for i, node in enumerate(self.nodes):
            if node.index != i:
                raise ConfigError(f"node {node!r} stored at position {i}")
            if isinstance(node, SkipAdd):
                if not 0 <= node.source < i:
                    raise ConfigError(f"{node!r}: source must precede the node")
                if self.shapes[node.source] != shape:
                    raise ConfigError(f"{node!r}: source shape {self.shapes[node.source]} != {shape}")
                seg_start = self.segment_nodes(self.segment_of(i)).start
                if node.source < seg_start - 1:
                    raise ConfigError(f"{node!r}: skip reaches past its segment input")
            shape = node.output_shape(shape)
            self.shapes.append(shape)
        if self.shapes[-1] != (self.spec.num_classes,):
            raise ConfigError(f"model output shape {self.shapes[-1]} != ({self.spec.num_classes},)")
        trainable = self.trainable_nodes()
        if trainable and (trainable[0].binarize_weights or trainable[-1].binarize_weights):
            raise ConfigError("first and last trainable layers must keep float weights")
        expected = [n.index - 1 for n in trainable[1:]] + [len(self.nodes) - 1]
        if self.injection_points != expected:
            raise ConfigError(f"injection points {self.injection_points} != {expected}")
        self.segment_starts = [self.segment_nodes(k).start for k in range(self.K)]


def injection_points_for(nodes: list[Node]) -> list[int]:
    """Last node before every trainable layer except the first, plus the output."""
    trainable = [n.index for n in nodes if n.trainable]
    return [i - 1 for i in trainable[1:]] + [len(nodes) - 1]


def _assemble(nodes: list[Node], spec: ArchSpec) -> ModelGraph:
    for i, n in enumerate(nodes):
        n.index = i
    return ModelGraph(nodes=nodes, injection_points=injection_points_for(nodes), spec=spec)


def build_model(spec: ArchSpec, rng: Rng) -> ModelGraph:
    """Instantiate and initialize the architecture described by ``spec``."""
    if spec.arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {spec.arch!r}; choose from {ARCHITECTURES}")
    # an MLP without hidden layers is plain logistic regression
    no_hidden_ok = spec.arch.startswith("mlp")
    if (not spec.widths and not no_hidden_ok) or min(spec.widths, default=1) < 1 or spec.num_classes < 2:
        raise ConfigError(f"invalid size parameters: widths={spec.widths}, classes={spec.num_classes}")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ConfigError(f"input_shape must be (channels, height, width), got {spec.input_shape}")
    builder = {
        "mlp_plain": _build_mlp,
        "mlp_residual": _build_mlp,
        "conv_plain": _build_conv,
        "mini_mixer": _build_mixer,
    }[spec.arch]
    return _assemble(builder(spec, rng), spec)


def _build_mlp(spec: ArchSpec, rng: Rng) -> list[Node]:
    act = spec.hidden_activation()
    residual = spec.arch == "mlp_residual" and spec.skip_connections
    nodes: list[Node] = [Flatten()]
    fan_in = int(np.prod(spec.input_shape))
    for layer, width in enumerate(spec.widths):
        block_input = len(nodes) - 1
        nodes.append(Dense(fan_in, width, rng, binarize=spec.binarize_weights and layer > 0))
        nodes.append(BatchNorm(width, axis=1))
        if residual and layer > 0 and width == fan_in:
            nodes.append(SkipAdd(block_input))
        nodes.append(Activation(act))
        fan_in = width
    nodes.append(Dense(fan_in, spec.num_classes, rng))
    return nodes


def _build_conv(spec: ArchSpec, rng: Rng) -> list[Node]:
    act = spec.hidden_activation()
    c, h, w = spec.input_shape
    nodes: list[Node] = []
    for layer, channels in enumerate(spec.widths):
        nodes.append(Conv2d(c, channels, spec.kernel, rng, padding=spec.kernel // 2,
                            binarize=spec.binarize_weights and layer > 0))
        nodes.append(BatchNorm(channels, axis=1))
        nodes.append(Activation(act))
        c = channels
        if layer % 2 == 1 and min(h, w) >= 2:
            nodes.append(MaxPool(2))
            h, w = h // 2, w // 2
    nodes.append(Flatten())
    nodes.append(Dense(c * h * w, spec.num_classes, rng))
    return nodes


def _build_mixer(spec: ArchSpec, rng: Rng) -> list[Node]:
    act = spec.hidden_activation()
    c, h, w = spec.input_shape
    p = spec.patch
    if h != w or h % p:
        raise ConfigError(f"mini_mixer needs a square image divisible by the patch size, got {h}x{w}, p={p}")
    if len(set(spec.widths)) != 1:
        raise ConfigError("mini_mixer needs a single hidden width (residual adds)")
    tokens, dim = (h // p) ** 2, spec.widths[0]
    nodes: list[Node] = [Patchify(p), Dense(c * p * p, dim, rng), BatchNorm(dim, axis=-1), Activation(act)]
    for _ in range(len(spec.widths)):
        for mixing in ("token", "channel"):
            block_input = len(nodes) - 1
            if mixing == "token":
                nodes.append(Dense(tokens, tokens, rng, axis=1, binarize=spec.binarize_weights))
            else:
                nodes.append(Dense(dim, dim, rng, axis=-1, binarize=spec.binarize_weights))
            nodes.append(BatchNorm(dim, axis=-1))
            if spec.skip_connections:
                nodes.append(SkipAdd(block_input))
            nodes.append(Activation(act))
    nodes.append(AvgPool((1,)))
    nodes.append(Dense(dim, spec.num_classes, rng))
    return nodes


# ---------------------------------------------------------------------------
# Forward execution
# ---------------------------------------------------------------------------


def _nbytes(cache: dict) -> int:
    return sum(v.nbytes for v in cache.values() if isinstance(v, np.ndarray))


class ForwardTrace:
    """Per-node backward caches, grouped by segment, with byte accounting."""

    def __init__(self, model: ModelGraph, policy: RetentionPolicy):
        self.model = model
        self.policy = policy
        self.caches: dict[int, dict] = {}
        self.held: dict[int, int] = {}  # segment -> bytes
        self.retained_bytes = 0
        self.peak_bytes = 0
        self.peak_segments = 0

    def store(self, k: int, node_index: int, cache: dict) -> None:
        self.caches[node_index] = cache
        b = _nbytes(cache)
        self.held[k] = self.held.get(k, 0) + b
        self.retained_bytes += b
        self.peak_bytes = max(self.peak_bytes, self.retained_bytes)
        self.peak_segments = max(self.peak_segments, len(self.held))

    def has_segment(self, k: int) -> bool:
        return k in self.held

    def release(self, k: int) -> None:
        for i in self.model.segment_nodes(k):
            self.caches.pop(i, None)
        self.retained_bytes -= self.held.pop(k, 0)

    def release_all(self) -> None:
        for k in list(self.held):
            self.release(k)


def forward_segment(model: ModelGraph, k: int, h: np.ndarray, mode: Mode | str = Mode.TRAIN,
                    trace: ForwardTrace | None = None, track_stats: bool = True) -> np.ndarray:
    """Run the nodes of segment ``k`` on ``h`` (the segment input).

    When ``trace`` is given, each node's backward cache is stored in it.
    ``track_stats=False`` uses batch statistics without touching the
    batch-norm running averages (for auxiliary forward passes).
    """
    train = Mode(mode) is Mode.TRAIN
    rng = model.segment_nodes(k)
    outputs = {rng.start - 1: h}
    for i in rng:
        node = model.nodes[i]
        try:
            if isinstance(node, SkipAdd):
                h, cache = node.forward(h, train, skip=outputs[node.source])
            else:
                h, cache = node.forward(h, train, track_stats)
        except ShapeError as exc:
            raise ShapeError(f"node {i} ({node.kind}): {exc}") from exc
        if trace is not None:
            trace.store(k, i, cache)
        outputs[i] = h
    return h


def forward(model: ModelGraph, x: np.ndarray, mode: Mode | str = Mode.EVAL,
            retention: RetentionPolicy = RetentionPolicy.NONE,
            on_segment: Callable[[int, np.ndarray, ForwardTrace], None] | None = None,
            track_stats: bool = True):
    """Full forward pass. Returns ``(logits, trace)``.

    With ``RetentionPolicy.SEGMENT`` every segment's buffers are released as
    soon as the segment finishes, after ``on_segment(k, y_k, trace)`` has had
    the chance to use them. ``RetentionPolicy.NONE`` returns ``trace=None``.
    """
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    trace = None if retention is RetentionPolicy.NONE else ForwardTrace(model, retention)
    h = x.astype(DTYPE, copy=False)
    for k in range(model.K):
        h = forward_segment(model, k, h, mode, trace, track_stats)
        if on_segment is not None:
            on_segment(k, h, trace)
        if retention is RetentionPolicy.SEGMENT:
            trace.release(k)
    return h, trace


def predict(model: ModelGraph, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = [forward(model, x[i : i + batch_size], Mode.EVAL)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def segment_backward(model: ModelGraph, trace: ForwardTrace, k: int, dy: np.ndarray,
                     ste_log: list | None = None, need_input_grad: bool = True):
    """Propagate ``dy`` (error at the output of segment ``k``) through segment ``k``.

    Returns ``(grads, dx)``: parameter gradients keyed like
    :meth:`ModelGraph.parameters` and the error at the segment input.
    Skip connections whose source is the segment input contribute to ``dx``.
    Callers that discard ``dx`` pass ``need_input_grad=False`` and get
    ``None`` back instead, saving the transposed product.
    """
    if trace is None or not trace.has_segment(k):
        raise TraceError(f"trace does not retain the buffers of segment {k}")
    seg = model.segment_nodes(k)
    if dy.shape[1:] != model.shapes[seg.stop - 1]:
        raise ShapeError(f"segment {k}: error shape {dy.shape[1:]} != output {model.shapes[seg.stop - 1]}")
    pending: dict[int, np.ndarray] = {seg.stop - 1: dy.astype(DTYPE, copy=False)}
    grads: dict[str, np.ndarray] = {}
    for i in reversed(seg):
        g = pending.pop(i, None)
        if g is None:
            continue
        node = model.nodes[i]
        if node.trainable and not need_input_grad:
            # only parameter-free nodes can precede the segment's trainable layer
            _, pgrads = node.backward(g, trace.caches[i], ste_log, need_input=False)
            grads.update({f"{i}.{name}": pg for name, pg in pgrads.items()})
            return grads, None
        g_in, pgrads = node.backward(g, trace.caches[i], ste_log)
        for name, pg in pgrads.items():
            grads[f"{i}.{name}"] = pg
        _accumulate(pending, i - 1, g_in)
        if isinstance(node, SkipAdd):
            _accumulate(pending, node.source, g)
    dx = pending.pop(seg.start - 1, None)
    if dx is None:
        dx = np.zeros((dy.shape[0],) + (model.input_shape if k == 0 else model.shapes[seg.start - 1]), DTYPE)
    return grads, dx


def _accumulate(pending: dict, key: int, g: np.ndarray) -> None:
    if key in pending:
        pending[key] = (pending[key] + g).astype(DTYPE)
    else:
        pending[key] = g


def zero_grads(model: ModelGraph, k: int) -> dict[str, np.ndarray]:
    return {key: np.zeros_like(p) for key, p in model.segment_parameters(k).items()}
