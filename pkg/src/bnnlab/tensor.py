"""Dense float32 numerics used by every other module.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. The
functions here add the contracts the rest of the package relies on:
shape validation, a finiteness check on every result, and reproducible
accumulation for the two reduction-heavy kernels (``matmul`` and
``conv2d``), which accumulate in float64 and round once to float32 so the
result does not depend on the BLAS blocking order.

All randomness flows through :class:`Rng`, a thin wrapper around numpy's
PCG64 bit generator. There is no module-level random state.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

DTYPE = np.float32


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.asarray(x, dtype=dtype)


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")
    return x


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 generator.

    Identical seeds give identical streams on every platform numpy supports.
    ``fork`` derives an independent child generator, for handing to a
    parallel consumer without sharing state.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def fork(self) -> "Rng":
        (child,) = self._seq.spawn(1)
        return Rng(child)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


def rng_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"rng_uniform: need lo < hi, got [{lo}, {hi})")
    out = rng.gen.uniform(lo, hi, size=tuple(shape)).astype(DTYPE)
    # float32 rounding can land exactly on hi
    np.minimum(out, np.nextafter(DTYPE(hi), DTYPE(lo)), out=out)
    return out


def rng_normal(rng: Rng, shape: Sequence[int], mean: float, std: float) -> np.ndarray:
    if std < 0:
        raise ValueError(f"rng_normal: std must be >= 0, got {std}")
    return rng.gen.normal(mean, std, size=tuple(shape)).astype(DTYPE)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``.

    Products of float32 values are exact in float64, so accumulating in
    float64 and rounding once yields the same float32 result whatever order
    the underlying BLAS chooses.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore"):  # reported by check_finite instead
        out = (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)
    return check_finite(out, "matmul")


def gemm32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 BLAS product used on the training hot path.

    Deterministic for a given platform and thread count, but the summation
    order is BLAS's own, so it can differ from :func:`matmul` in the last
    bits. Integer-valued operands (e.g. +-1 tensors) give identical results.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm32: cannot multiply {a.shape} x {b.shape}")
    out = np.matmul(a.astype(DTYPE, copy=False), b.astype(DTYPE, copy=False))
    return check_finite(out, "gemm32")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    h, wd = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if w.shape[2] > h or w.shape[3] > wd:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {(h, wd)}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Strided view ``[n, c, h', w', kh, kw]`` over the zero-padded input."""
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x[n, c, h, w]`` with ``w[o, c, kh, kw]``."""
    _check_conv(x, w, stride, padding)
    win = conv_windows(x.astype(np.float64), w.shape[2], w.shape[3], stride, padding)
    out = np.einsum("nchwij,ocij->nohw", win, w.astype(np.float64), optimize=True)
    return check_finite(out.astype(DTYPE), "conv2d")


def conv2d_grad_weight(x: np.ndarray, dout: np.ndarray, kernel_shape, stride: int, padding: int) -> np.ndarray:
    _, _, kh, kw = kernel_shape
    win = conv_windows(x.astype(np.float64), kh, kw, stride, padding)
    g = np.einsum("nchwij,nohw->ocij", win, dout.astype(np.float64), optimize=True)
    return g.astype(DTYPE)


def conv2d_grad_input(dout: np.ndarray, w: np.ndarray, input_shape, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = input_shape
    _, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    gpad = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    d64 = dout.astype(np.float64)
    w64 = w.astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oc->nchw", d64, w64[:, :, i, j])
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    if padding:
        gpad = gpad[:, :, padding:-padding, padding:-padding]
    return gpad.astype(DTYPE)


# ---------------------------------------------------------------------------
# Elementwise math
# ---------------------------------------------------------------------------


def _same_shape(a: np.ndarray, b, op: str) -> None:
    if np.ndim(b) != 0 and np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _same_shape(a, b, "add")
    return check_finite(np.add(a, b, dtype=DTYPE), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return check_finite(np.subtract(a, b, dtype=DTYPE), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    return check_finite(np.multiply(a, b, dtype=DTYPE), "mul")


def scale(a, s: float):
    return check_finite(np.multiply(a, DTYPE(s), dtype=DTYPE), "scale")


def tanh(a):
    return np.tanh(as_tensor(a))


def relu(a):
    return np.maximum(as_tensor(a), DTYPE(0))


def clip(a, lo: float, hi: float):
    return np.clip(as_tensor(a), DTYPE(lo), DTYPE(hi))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "relu": relu,
    "clip": clip,
}


def elementwise(op: str, *operands):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``targets`` is one-hot. The returned error is ``(softmax - targets) / n``.
    """
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    check_finite(logits, "softmax_cross_entropy logits")
    n = logits.shape[0]
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = float(-(targets * logp).sum() / n)
    error = ((np.exp(logp) - targets) / n).astype(DTYPE)
    return loss, error


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1
    return out
