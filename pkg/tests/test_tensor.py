import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnlab import tensor as T
from bnnlab.errors import NonFiniteError, ShapeError
from bnnlab.tensor import Rng


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out.astype(np.float32)


def naive_conv(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += float(xp[b, ic, i * stride + di, j * stride + dj]) * float(w[oc, ic, di, dj])
                    out[b, oc, i, j] = acc
    return out.astype(np.float32)


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestMatmul:
    def test_identity(self):
        b = np.array([[3, 4], [5, 6]], np.float32)
        assert np.array_equal(T.matmul(np.eye(2, dtype=np.float32), b), b)

    def test_hand_value(self):
        out = T.matmul(np.array([[1, -1]], np.float32), np.array([[2], [3]], np.float32))
        assert out.tolist() == [[-1.0]]

    def test_matches_triple_loop(self):
        r = np.random.default_rng(0)
        a, b = rand(r, 5, 7), rand(r, 7, 3)
        assert np.array_equal(T.matmul(a, b), naive_matmul(a, b))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_property_exact(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = rand(r, m, k), rand(r, k, n)
        assert np.array_equal(T.matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))

    def test_inputs_not_mutated(self):
        r = np.random.default_rng(1)
        a, b = rand(r, 3, 4), rand(r, 4, 2)
        a0, b0 = a.copy(), b.copy()
        T.matmul(a, b)
        assert np.array_equal(a, a0) and np.array_equal(b, b0)

    def test_overflow_reported(self):
        big = np.full((1, 2), 3e38, np.float32)
        with pytest.raises(NonFiniteError):
            T.matmul(big, np.ones((2, 1), np.float32))

    def test_gemm32_matches_on_integers(self):
        r = np.random.default_rng(2)
        a = np.sign(rand(r, 16, 300))
        b = np.sign(rand(r, 300, 9))
        assert np.array_equal(T.gemm32(a, b), T.matmul(a, b))


class TestConv:
    def test_scale_kernel(self):
        out = T.conv2d(np.ones((1, 1, 3, 3), np.float32), np.full((1, 1, 1, 1), 2, np.float32))
        assert np.array_equal(out, np.full((1, 1, 3, 3), 2, np.float32))

    def test_hand_value(self):
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        k = np.array([[[[1, 0], [0, 1]]]], np.float32)
        assert T.conv2d(x, k).tolist() == [[[[5.0]]]]

    def test_sliding_window_oracle(self):
        r = np.random.default_rng(0)
        x, w = rand(r, 2, 3, 8, 8), rand(r, 4, 3, 3, 3)
        assert np.array_equal(T.conv2d(x, w, stride=2, padding=1), naive_conv(x, w, 2, 1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 8), st.integers(1, 3), st.integers(1, 3),
           st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
    def test_property_exact(self, n, c, h, o, k, stride, pad, seed):
        r = np.random.default_rng(seed)
        x, w = rand(r, n, c, h, h), rand(r, o, c, k, k)
        assert np.array_equal(T.conv2d(x, w, stride, pad), naive_conv(x, w, stride, pad))

    def test_1x1_is_pixel_matmul(self):
        r = np.random.default_rng(3)
        x, w = rand(r, 2, 5, 4, 4), rand(r, 3, 5, 1, 1)
        out = T.conv2d(x, w)
        rows = x.transpose(0, 2, 3, 1).reshape(-1, 5)
        ref = T.matmul(rows, w[:, :, 0, 0].T).reshape(2, 4, 4, 3).transpose(0, 3, 1, 2)
        assert np.array_equal(out, ref)

    def test_output_size(self):
        assert T.conv_output_size(8, 3, 2, 1) == 4
        assert T.conv2d(np.ones((1, 1, 8, 8), np.float32), np.ones((1, 1, 3, 3), np.float32), 2, 1).shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("xs,ws,stride,pad", [
        ((1, 1, 2, 2), (1, 1, 3, 3), 1, 0),  # kernel larger than input
        ((1, 2, 4, 4), (1, 3, 3, 3), 1, 0),  # channel mismatch
        ((1, 1, 4, 4), (1, 1, 3, 3), 0, 0),  # stride 0
        ((1, 4, 4), (1, 1, 3, 3), 1, 0),  # rank
    ])
    def test_invalid_geometry(self, xs, ws, stride, pad):
        with pytest.raises(ShapeError):
            T.conv2d(np.ones(xs, np.float32), np.ones(ws, np.float32), stride, pad)

    def test_gradients_match_finite_differences(self):
        r = np.random.default_rng(4)
        x, w = r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3))
        g = r.standard_normal((2, 3, 3, 3))

        def loss(xv, wv):
            return float((naive_conv(xv, wv, 2, 1).astype(np.float64) * g).sum())

        dw = T.conv2d_grad_weight(x.astype(np.float32), g.astype(np.float32), w.shape, 2, 1)
        dx = T.conv2d_grad_input(g.astype(np.float32), w.astype(np.float32), x.shape, 2, 1)
        eps = 1e-3
        for arr, grad in ((w, dw), (x, dx)):
            for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)]:
                if idx[0] >= arr.shape[0]:
                    continue
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += eps
                minus[idx] -= eps
                num = (loss(plus, w) - loss(minus, w)) / (2 * eps) if arr is x else \
                    (loss(x, plus) - loss(x, minus)) / (2 * eps)
                assert math.isclose(grad[idx], num, rel_tol=1e-3, abs_tol=1e-3)


class TestElementwise:
    def test_clip(self):
        assert T.elementwise("clip", np.array([-2, 0.5, 3], np.float32), -1, 1).tolist() == [-1, 0.5, 1]

    def test_tanh_zero(self):
        assert T.elementwise("tanh", np.array([0.0], np.float32)).tolist() == [0.0]

    def test_add(self):
        assert T.elementwise("add", np.array([1, 2], np.float32), np.array([3, 4], np.float32)).tolist() == [4, 6]

    def test_scalar_operand(self):
        assert T.elementwise("mul", np.array([1, 2], np.float32), 3.0).tolist() == [3, 6]
        assert T.elementwise("scale", np.array([1, 2], np.float32), 0.5).tolist() == [0.5, 1]

    def test_relu_and_sub(self):
        assert T.elementwise("relu", np.array([-1, 2], np.float32)).tolist() == [0, 2]
        assert T.elementwise("sub", np.array([1, 2], np.float32), np.array([3, 1], np.float32)).tolist() == [-2, 1]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.elementwise("add", np.ones(2, np.float32), np.ones(3, np.float32))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.elementwise("pow", np.ones(2, np.float32))

    def test_output_dtype(self):
        assert T.add(np.ones(2, np.float32), np.ones(2, np.float32)).dtype == np.float32


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss, err = T.softmax_cross_entropy(np.zeros((1, 2), np.float32), np.array([[1, 0]], np.float32))
        assert math.isclose(loss, math.log(2), rel_tol=1e-6)
        assert np.allclose(err, [[-0.5, 0.5]])

    def test_stable_for_large_logits(self):
        loss, err = T.softmax_cross_entropy(np.array([[1000, 0]], np.float32), np.array([[1, 0]], np.float32))
        assert loss < 1e-6 and np.all(np.isfinite(err))

    def test_error_rows_sum_to_zero(self):
        r = np.random.default_rng(0)
        logits = rand(r, 6, 10)
        _, err = T.softmax_cross_entropy(logits, T.one_hot(r.integers(0, 10, 6), 10))
        assert np.abs(err.sum(axis=1)).max() < 1e-6

    def test_finite_difference(self):
        r = np.random.default_rng(1)
        logits = r.standard_normal((4, 10))
        t = T.one_hot(r.integers(0, 10, 4), 10)
        _, err = T.softmax_cross_entropy(logits.astype(np.float32), t)

        def f(z):
            z = z - z.max(axis=1, keepdims=True)
            return float(-(t * (z - np.log(np.exp(z).sum(axis=1, keepdims=True)))).sum() / len(z))

        num = np.zeros_like(logits)
        for idx in np.ndindex(*logits.shape):
            p, m = logits.copy(), logits.copy()
            p[idx] += 1e-3
            m[idx] -= 1e-3
            num[idx] = (f(p) - f(m)) / 2e-3
        assert np.abs(err - num).max() / np.abs(num).max() < 1e-3

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            T.softmax_cross_entropy(np.zeros((2, 3), np.float32), np.zeros((2, 4), np.float32))


class TestRng:
    def test_determinism(self):
        a1, a2 = Rng(42), Rng(42)
        x1, y1 = T.rng_uniform(a1, (5,), 0, 1), T.rng_uniform(a1, (5,), 0, 1)
        x2, y2 = T.rng_uniform(a2, (5,), 0, 1), T.rng_uniform(a2, (5,), 0, 1)
        assert not np.array_equal(x1, y1)
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2)

    def test_uniform_mean_and_range(self):
        u = T.rng_uniform(Rng(0), (10**5,), 0, 1)
        assert abs(u.mean() - 0.5) < 0.01
        assert u.min() >= 0 and u.max() < 1

    def test_normal_std(self):
        z = T.rng_normal(Rng(0), (10**5,), 0, 1)
        assert abs(z.std() - 1) < 0.02

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            T.rng_uniform(Rng(0), (3,), 1, 1)
        with pytest.raises(ValueError):
            T.rng_normal(Rng(0), (3,), 0, -1)

    def test_fork_independent_and_reproducible(self):
        a, b = Rng(7), Rng(7)
        fa, fb = a.fork(), b.fork()
        assert np.array_equal(fa.random(4), fb.random(4))
        assert not np.array_equal(a.fork().random(4), Rng(7).random(4))

    def test_named_algorithm(self):
        assert Rng.algorithm == "PCG64"


def test_check_finite():
    with pytest.raises(NonFiniteError, match="1 non-finite"):
        T.check_finite(np.array([1.0, np.nan]), "probe")
