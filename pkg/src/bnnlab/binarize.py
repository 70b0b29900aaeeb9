"""Sign binarization and the two straight-through estimators.

Zero maps to +1 everywhere (float path and packed path alike), so a
binarized value always fits in one bit.
"""

from __future__ import annotations

import enum

import numpy as np
from numba import njit

from .errors import ShapeError
from .tensor import DTYPE


class SteKind(enum.Enum):
    NON_SATURATING = "non_saturating"
    SATURATING = "saturating"


# Weights always use the pass-through estimator, binary activations the
# hard-tanh one. Neither is a tunable.
WEIGHT_STE = SteKind.NON_SATURATING
ACTIVATION_STE = SteKind.SATURATING


def sign_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == DTYPE and x.flags.c_contiguous:
        return _sign_kernel(x.reshape(-1)).reshape(x.shape)
    return np.where(x >= 0, DTYPE(1), DTYPE(-1))


@njit(cache=True, nogil=True)
def _sign_kernel(x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = 1.0 if x[i] >= 0 else -1.0
    return out


def ste_backward(kind: SteKind, upstream: np.ndarray, preactivation: np.ndarray) -> np.ndarray:
    """Surrogate gradient of ``sign`` at ``preactivation``.

    Saturating: pass ``upstream`` where ``|z| <= 1`` and zero elsewhere.
    Non-saturating: pass ``upstream`` unchanged.
    """
    if np.shape(upstream) != np.shape(preactivation):
        raise ShapeError(f"ste_backward: {np.shape(upstream)} vs {np.shape(preactivation)}")
    if kind is SteKind.NON_SATURATING:
        return upstream
    if kind is SteKind.SATURATING:
        return np.multiply(upstream, np.abs(preactivation) <= 1, dtype=DTYPE)
    raise ValueError(f"unknown STE kind {kind!r}")


def binarize_weights(latent: np.ndarray) -> np.ndarray:
    return sign_forward(latent)


def weight_grad_to_latent(grad_binary: np.ndarray, latent: np.ndarray) -> np.ndarray:
    # the gradient computed against sign(W) is applied to W as is
    return ste_backward(WEIGHT_STE, grad_binary, latent)
