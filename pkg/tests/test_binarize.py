import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnnlab.binarize import (ACTIVATION_STE, WEIGHT_STE, SteKind, binarize_weights, sign_forward, ste_backward,
                             weight_grad_to_latent)
from bnnlab.errors import ShapeError

floats = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def test_sign_examples():
    assert sign_forward(np.array([-0.5, 0.5], np.float32)).tolist() == [-1, 1]
    assert sign_forward(np.array([0.0], np.float32)).tolist() == [1]
    assert sign_forward(np.array([-0.0], np.float32)).tolist() == [1]


@given(arrays(np.float32, st.integers(1, 50), elements=floats))
def test_sign_binary_and_idempotent(x):
    s = sign_forward(x)
    assert set(np.unique(s)) <= {-1.0, 1.0}
    assert np.array_equal(sign_forward(s), s)


def test_exactly_two_ste_kinds():
    assert {k.name for k in SteKind} == {"NON_SATURATING", "SATURATING"}
    assert WEIGHT_STE is SteKind.NON_SATURATING and ACTIVATION_STE is SteKind.SATURATING


def test_ste_examples():
    assert ste_backward(SteKind.NON_SATURATING, np.array([3.0, -2.0]), np.array([9.0, -9.0])).tolist() == [3, -2]
    out = ste_backward(SteKind.SATURATING, np.array([3, -2, 5], np.float32), np.array([0.5, -2, 1], np.float32))
    assert out.tolist() == [3, 0, 5]
    dy = np.array([1.5, -2.5], np.float32)
    assert np.array_equal(ste_backward(SteKind.SATURATING, dy, np.zeros(2, np.float32)), dy)


def test_ste_shape_mismatch():
    with pytest.raises(ShapeError):
        ste_backward(SteKind.SATURATING, np.ones(2), np.ones(3))


@settings(max_examples=50)
@given(st.integers(1, 64), st.integers(0, 2**31))
def test_saturating_matches_scalar_oracle(n, seed):
    r = np.random.default_rng(seed)
    dy = r.standard_normal(n).astype(np.float32)
    z = (r.standard_normal(n) * 2).astype(np.float32)
    z[: n // 4] = r.choice([-1.0, 1.0], n // 4)  # boundary values pass
    out = ste_backward(SteKind.SATURATING, dy, z)
    for i in range(n):
        assert out[i] == (dy[i] if abs(z[i]) <= 1 else 0.0)
    assert np.array_equal(ste_backward(SteKind.NON_SATURATING, dy, z), dy)


def test_binarize_weights():
    assert binarize_weights(np.array([[0.01, -0.01]], np.float32)).tolist() == [[1, -1]]
    assert np.all(binarize_weights(np.full((3, 3), 0.2, np.float32)) == 1)


def test_binarize_does_not_mutate():
    w = np.array([0.3, -0.7], np.float32)
    w0 = w.copy()
    binarize_weights(w)
    assert np.array_equal(w, w0)


def test_weight_gradient_routed_unchanged():
    g = np.array([0.5, -3.0, 7.0], np.float32)
    latent = np.array([5.0, -0.1, 0.0], np.float32)  # large |W| is not masked
    assert np.array_equal(weight_grad_to_latent(g, latent), g)
