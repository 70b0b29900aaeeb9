"""Training strategies: BP, DFA, DRTP, HSIC bottleneck and Sigprop target loop.

Every strategy turns one batch into per-segment parameter gradients. They
differ in where the learning signal of a hidden segment comes from:

* BP chains :func:`~bnnlab.graph.segment_backward` from the output down.
* DFA projects the output error to each segment with a fixed matrix.
* DRTP projects the one-hot target instead, so a segment can be trained as
  soon as its own forward pass is done.
* HSIC trains each segment on a kernel dependence objective between its
  output, the network input and the labels.
* SigpropTL projects the output error into input space, runs a second
  forward pass from the shifted input, and pulls each segment's output
  towards the activations of that second pass.

The final segment is always trained with the true cross-entropy error.

Update-unlocked strategies (DRTP, HSIC, SigpropTL) hold at most one
segment's buffers at a time and report each segment's gradients through
``on_grads`` as soon as they are computed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .graph import ForwardTrace, Mode, ModelGraph, RetentionPolicy, forward, forward_segment, segment_backward
from .tensor import DTYPE, Rng

LossFn = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]
GradCallback = Callable[[int, dict], None]


class Algo(str, enum.Enum):
    BP = "bp"
    DFA = "dfa"
    DRTP = "drtp"
    HSIC = "hsic"
    SIGPROP = "sigproptl"


UPDATE_UNLOCKED = {Algo.DRTP, Algo.HSIC, Algo.SIGPROP}

# hyperparameter grids searched per algorithm, besides the learning rate
HSIC_GAMMAS = (2.0, 20.0, 200.0)
SIGPROP_ALPHAS = (1.0, 0.1, 0.01)


@dataclass
class FeedbackMatrices:
    """Constant random projections, one per hidden segment (or one into input space).

    ``matrices[k]`` has shape ``(C, prod(segment_k_output_shape))``; for
    SigpropTL the single entry under key ``-1`` maps to the input shape.
    """

    kind: Algo
    matrices: dict[int, np.ndarray]
    shapes: dict[int, tuple]
    scale: float

    def project(self, k: int, signal: np.ndarray) -> np.ndarray:
        B = self.matrices[k]
        if signal.shape[1] != B.shape[0]:
            raise ShapeError(f"feedback {k}: signal width {signal.shape[1]} != {B.shape[0]}")
        return T.gemm32(signal, B).reshape((signal.shape[0],) + self.shapes[k])


def make_feedback(kind: Algo | str, model: ModelGraph, rng: Rng, alpha: float = 1.0) -> FeedbackMatrices | None:
    """Sample the fixed feedback matrices for ``kind`` (``None`` if it needs none).

    Entries are uniform in ``(-s, s)`` with ``s = 1/sqrt(C)``; SigpropTL
    multiplies ``s`` by ``alpha``.
    """
    kind = Algo(kind)
    C = model.num_classes
    s = 1.0 / np.sqrt(C)
    if kind in (Algo.DFA, Algo.DRTP):
        shapes = {k: model.segment_output_shape(k) for k in range(model.K - 1)}
    elif kind is Algo.SIGPROP:
        if alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {alpha}")
        s *= alpha
        shapes = {-1: model.input_shape}
    else:
        return None
    if s == 0:  # alpha = 0: the target input is the input itself
        mats = {k: np.zeros((C, int(np.prod(shp))), DTYPE) for k, shp in shapes.items()}
    else:
        mats = {k: T.rng_uniform(rng, (C, int(np.prod(shp))), -s, s) for k, shp in shapes.items()}
    return FeedbackMatrices(kind=kind, matrices=mats, shapes=shapes, scale=float(s))


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    loss: float
    logits: np.ndarray
    objectives: dict[int, float] = field(default_factory=dict)
    peak_bytes: int = 0
    peak_segments: int = 0


def _emit(grads: dict, k: int, seg_grads: dict, on_grads: GradCallback | None) -> None:
    grads.update(seg_grads)
    if on_grads is not None:
        on_grads(k, seg_grads)


# ---------------------------------------------------------------------------
# BP and DFA (update-locked: full forward trace, then errors)
# ---------------------------------------------------------------------------


def train_step_bp(model: ModelGraph, x: np.ndarray, targets: np.ndarray, *,
                  loss_fn: LossFn = T.softmax_cross_entropy, on_grads: GradCallback | None = None,
                  ste_log: list | None = None) -> StepResult:
    logits, trace = forward(model, x, Mode.TRAIN, RetentionPolicy.ALL)
    loss, e = loss_fn(logits, targets)
    grads: dict[str, np.ndarray] = {}
    dy = e
    for k in reversed(range(model.K)):
        seg_grads, dy = segment_backward(model, trace, k, dy, ste_log, need_input_grad=k > 0)
        trace.release(k)
        _emit(grads, k, seg_grads, on_grads)
    return StepResult(grads, loss, logits, peak_bytes=trace.peak_bytes, peak_segments=trace.peak_segments)


def train_step_dfa(model: ModelGraph, x: np.ndarray, targets: np.ndarray, feedback: FeedbackMatrices, *,
                   loss_fn: LossFn = T.softmax_cross_entropy, on_grads: GradCallback | None = None,
                   ste_log: list | None = None) -> StepResult:
    _require_feedback(feedback, model, Algo.DFA)
    logits, trace = forward(model, x, Mode.TRAIN, RetentionPolicy.ALL)
    loss, e = loss_fn(logits, targets)
    grads: dict[str, np.ndarray] = {}
    last = model.K - 1
    seg_grads, _ = segment_backward(model, trace, last, e, ste_log, need_input_grad=False)
    trace.release(last)
    _emit(grads, last, seg_grads, on_grads)
    # sequential here; every hidden segment could run in parallel
    for k in range(last):
        seg_grads, _ = segment_backward(model, trace, k, feedback.project(k, e), ste_log, need_input_grad=False)
        trace.release(k)
        _emit(grads, k, seg_grads, on_grads)
    return StepResult(grads, loss, logits, peak_bytes=trace.peak_bytes, peak_segments=trace.peak_segments)


# ---------------------------------------------------------------------------
# DRTP (update-unlocked)
# ---------------------------------------------------------------------------


def train_step_drtp(model: ModelGraph, x: np.ndarray, targets: np.ndarray, feedback: FeedbackMatrices, *,
                    sign: float = 1.0, loss_fn: LossFn = T.softmax_cross_entropy,
                    on_grads: GradCallback | None = None, ste_log: list | None = None) -> StepResult:
    """DRTP step: hidden segment ``k`` descends along ``sign * (targets @ B_k) / n``.

    The signal depends only on the labels, so each segment is trained and
    its buffers dropped before the next segment runs.
    """
    _require_feedback(feedback, model, Algo.DRTP)
    n = x.shape[0]
    grads: dict[str, np.ndarray] = {}
    out: dict = {}

    def on_segment(k: int, y: np.ndarray, trace: ForwardTrace) -> None:
        if k < model.K - 1:
            dy = feedback.project(k, targets) * DTYPE(sign / n)
        else:
            out["loss"], dy = loss_fn(y, targets)
        seg_grads, _ = segment_backward(model, trace, k, dy, ste_log, need_input_grad=False)
        _emit(grads, k, seg_grads, on_grads)

    logits, trace = forward(model, x, Mode.TRAIN, RetentionPolicy.SEGMENT, on_segment=on_segment)
    return StepResult(grads, out["loss"], logits, peak_bytes=trace.peak_bytes, peak_segments=trace.peak_segments)


# ---------------------------------------------------------------------------
# HSIC bottleneck (update-unlocked)
# ---------------------------------------------------------------------------


def centering(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def pairwise_sq_dists(A: np.ndarray) -> np.ndarray:
    A = A.reshape(A.shape[0], -1).astype(np.float64)
    sq = (A * A).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * A @ A.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def median_bandwidth(A: np.ndarray, floor: float = 1e-8) -> float:
    """Median pairwise Euclidean distance between rows, floored."""
    d = pairwise_sq_dists(A)
    iu = np.triu_indices(d.shape[0], k=1)
    return max(float(np.median(np.sqrt(d[iu]))), floor)


def gaussian_kernel(A: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-pairwise_sq_dists(A) / (2.0 * sigma * sigma))


def hsic(K: np.ndarray, L: np.ndarray) -> float:
    """Biased HSIC estimate ``tr(K H L H) / (m-1)^2`` from two kernel matrices."""
    m = K.shape[0]
    H = centering(m)
    return float(np.trace(K @ H @ L @ H) / (m - 1) ** 2)


def _bandwidth(A: np.ndarray, policy) -> float:
    if policy == "median":
        return median_bandwidth(A)
    sigma = float(policy)
    if not sigma > 0:
        raise ConfigError(f"HSIC bandwidth must be positive, got {policy!r}")
    return sigma


def hsic_objective_and_grad(Z: np.ndarray, Mx: np.ndarray, My: np.ndarray, gamma: float, sigma_policy="median"):
    """``HSIC(Z, X) - gamma * HSIC(Z, Y)`` and its gradient with respect to ``Z``.

    ``Mx`` and ``My`` are the centred input/label kernels ``H K H``. The
    bandwidth of the ``Z`` kernel is treated as a constant when
    differentiating.
    """
    m = Z.shape[0]
    Zf = Z.reshape(m, -1).astype(np.float64)
    sigma = _bandwidth(Zf, sigma_policy)
    Kz = gaussian_kernel(Zf, sigma)
    M = Mx - gamma * My
    norm = (m - 1) ** 2
    objective = float((Kz * M).sum() / norm)
    G = Kz * M
    dZ = -(2.0 / (sigma * sigma * norm)) * (G.sum(axis=1)[:, None] * Zf - G @ Zf)
    return objective, dZ.reshape(Z.shape).astype(DTYPE)


def train_step_hsic(model: ModelGraph, x: np.ndarray, targets: np.ndarray, gamma: float = 20.0,
                    sigma_policy="median", *, loss_fn: LossFn = T.softmax_cross_entropy,
                    on_grads: GradCallback | None = None, ste_log: list | None = None,
                    label_sigma: float = 1.0) -> StepResult:
    m = x.shape[0]
    if m < 4:
        raise ConfigError(f"HSIC needs a batch of at least 4 samples, got {m}")
    H = centering(m)
    Kx = gaussian_kernel(x, _bandwidth(x.reshape(m, -1), sigma_policy))
    Ky = gaussian_kernel(targets, label_sigma)
    Mx, My = H @ Kx @ H, H @ Ky @ H
    grads: dict[str, np.ndarray] = {}
    objectives: dict[int, float] = {}
    out: dict = {}

    def on_segment(k: int, y: np.ndarray, trace: ForwardTrace) -> None:
        if k < model.K - 1:
            objectives[k], dy = hsic_objective_and_grad(y, Mx, My, gamma, sigma_policy)
        else:
            out["loss"], dy = loss_fn(y, targets)
            objectives[k] = out["loss"]
        seg_grads, _ = segment_backward(model, trace, k, dy, ste_log, need_input_grad=False)
        _emit(grads, k, seg_grads, on_grads)

    logits, trace = forward(model, x, Mode.TRAIN, RetentionPolicy.SEGMENT, on_segment=on_segment)
    return StepResult(grads, out["loss"], logits, objectives, trace.peak_bytes, trace.peak_segments)


# ---------------------------------------------------------------------------
# Sigprop target loop (update-unlocked second pass)
# ---------------------------------------------------------------------------


def sigprop_target_input(x: np.ndarray, sample_error: np.ndarray, feedback: FeedbackMatrices) -> np.ndarray:
    """``x - B e`` with ``e`` the per-sample output error (alpha lives in ``B``)."""
    return (x - feedback.project(-1, sample_error)).astype(DTYPE)


def train_step_sigproptl(model: ModelGraph, x: np.ndarray, targets: np.ndarray, feedback: FeedbackMatrices, *,
                         loss_fn: LossFn = T.softmax_cross_entropy, on_grads: GradCallback | None = None,
                         ste_log: list | None = None) -> StepResult:
    """Sigprop target loop.

    Pass 1 computes the output error without keeping buffers. The error is
    projected to a target input ``x*``; pass 2 runs ``x`` and ``x*`` side by
    side one segment at a time, and segment ``k`` minimises
    ``0.5 * ||y_k - y*_k||^2`` (batch mean) with ``y*_k`` held constant.
    """
    _require_feedback(feedback, model, Algo.SIGPROP)
    n = x.shape[0]
    logits1, _ = forward(model, x, Mode.TRAIN, RetentionPolicy.NONE, track_stats=False)
    _, e1 = loss_fn(logits1, targets)
    x_star = sigprop_target_input(x, e1 * DTYPE(n), feedback)

    trace = ForwardTrace(model, RetentionPolicy.SEGMENT)
    grads: dict[str, np.ndarray] = {}
    objectives: dict[int, float] = {}
    h, h_star = x.astype(DTYPE, copy=False), x_star
    loss = float("nan")
    for k in range(model.K):
        y = forward_segment(model, k, h, Mode.TRAIN, trace)
        if k < model.K - 1:
            y_star = forward_segment(model, k, h_star, Mode.TRAIN, None, track_stats=False)
            diff = (y - y_star).astype(DTYPE)
            objectives[k] = float(0.5 * np.sum(diff.astype(np.float64) ** 2) / n)
            dy = diff / DTYPE(n)
            h_star = y_star
        else:
            loss, dy = loss_fn(y, targets)
            objectives[k] = loss
        seg_grads, _ = segment_backward(model, trace, k, dy, ste_log, need_input_grad=False)
        trace.release(k)
        _emit(grads, k, seg_grads, on_grads)
        h = y
    return StepResult(grads, loss, h, objectives, trace.peak_bytes, trace.peak_segments)


# ---------------------------------------------------------------------------
# Strategy object
# ---------------------------------------------------------------------------


def _require_feedback(feedback: FeedbackMatrices | None, model: ModelGraph, kind: Algo) -> None:
    if feedback is None:
        raise ConfigError(f"{kind.value} needs feedback matrices")
    needed = [-1] if kind is Algo.SIGPROP else list(range(model.K - 1))
    missing = [k for k in needed if k not in feedback.matrices]
    if missing:
        raise ConfigError(f"{kind.value}: missing feedback matrices for segments {missing}")


@dataclass
class TrainingStrategy:
    kind: Algo
    feedback: FeedbackMatrices | None = None
    gamma: float = 20.0
    sigma_policy: str | float = "median"
    alpha: float = 1.0
    drtp_sign: float = 1.0

    @property
    def retention(self) -> RetentionPolicy:
        return RetentionPolicy.SEGMENT if self.kind in UPDATE_UNLOCKED else RetentionPolicy.ALL

    @property
    def update_unlocked(self) -> bool:
        return self.kind in UPDATE_UNLOCKED

    def step(self, model: ModelGraph, x: np.ndarray, targets: np.ndarray, **kw) -> StepResult:
        if self.kind is Algo.BP:
            return train_step_bp(model, x, targets, **kw)
        if self.kind is Algo.DFA:
            return train_step_dfa(model, x, targets, self.feedback, **kw)
        if self.kind is Algo.DRTP:
            return train_step_drtp(model, x, targets, self.feedback, sign=self.drtp_sign, **kw)
        if self.kind is Algo.HSIC:
            return train_step_hsic(model, x, targets, self.gamma, self.sigma_policy, **kw)
        return train_step_sigproptl(model, x, targets, self.feedback, **kw)


def make_strategy(kind: Algo | str, model: ModelGraph, rng: Rng, *, gamma: float = 20.0, alpha: float = 1.0,
                  sigma_policy: str | float = "median") -> TrainingStrategy:
    kind = Algo(kind)
    return TrainingStrategy(kind=kind, feedback=make_feedback(kind, model, rng, alpha), gamma=gamma,
                            sigma_policy=sigma_policy, alpha=alpha)
