"""Adam with L2 weight decay, applied to the latent float32 parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NonFiniteError, ShapeError
from .tensor import DTYPE


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled: bool = False
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              where=None) -> None:
    """One Adam update, in place on ``params`` and ``state``.

    Only keys present in ``grads`` are updated. Decay is coupled (added to
    the gradient) unless ``state.decoupled`` is set. ``where`` maps a
    parameter key to a label (e.g. its segment) for the non-finite gradient
    diagnostic.
    """
    begin_step(state)
    adam_update(state, params, grads, where)


def begin_step(state: AdamState) -> None:
    """Advance the step counter; call once per batch before ``adam_update``."""
    state.t += 1


def adam_update(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                where=None) -> None:
    """Apply the update for ``grads`` at the current step count.

    Update-unlocked training calls this once per segment within a batch.
    """
    if state.t < 1:
        raise RuntimeError("adam_update called before begin_step")
    for key, g in grads.items():
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient for {key}: {g.shape} vs parameter {params[key].shape}")
        if not np.all(np.isfinite(g)):
            label = where(key) if where is not None else key
            raise NonFiniteError(f"non-finite gradient for parameter {key} ({label}); step aborted")

    b1, b2 = state.beta1, state.beta2
    f = DTYPE
    step = f(state.lr / (1.0 - b1**state.t))
    root_bc2 = f(np.sqrt(1.0 - b2**state.t))
    coupled = f(0 if state.decoupled else state.weight_decay)
    decoupled = f(state.lr * state.weight_decay if state.decoupled else 0)
    for key, g in grads.items():
        p = params[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        if not p.flags.c_contiguous:
            raise ShapeError(f"parameter {key} must be C-contiguous")
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=DTYPE).reshape(-1), state.m[key].reshape(-1),
                     state.v[key].reshape(-1), f(b1), f(1 - b1), f(b2), f(1 - b2), step, root_bc2,
                     f(state.eps), coupled, decoupled)


@njit(cache=True, nogil=True, fastmath=True)
def _adam_kernel(p, g, m, v, b1, c1, b2, c2, step, root_bc2, eps, coupled, decoupled):
    # one fused pass: lr * m_hat / (sqrt(v_hat) + eps) with bias corrections folded into step and root_bc2
    for i in range(p.size):
        gi = g[i] + coupled * p[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) / root_bc2 + eps) + decoupled * p[i]
