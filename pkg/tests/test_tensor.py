import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodtransformer import tensor as T
from floodtransformer.errors import InvalidParam, NotScalar, ShapeMismatch
from floodtransformer.tensor import Tape, Tensor, backward

from conftest import numeric_grad, rel_err


def naive_conv2d(x, k, stride, pad):
    """Six nested loops, no vectorization."""
    c_in, h, w = x.shape
    c_out, _, kk, _ = k.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for di in range(kk):
                        for dj in range(kk):
                            acc += xp[c, i * stride + di, j * stride + dj] * k[o, c, di, dj]
                out[o, i, j] = acc
    return out


def pixel_bilinear(img, factor):
    """Interpolate each output pixel from its four neighbours, half-pixel centres."""
    h, w = img.shape
    out = np.zeros((h * factor, w * factor))
    for oy in range(h * factor):
        for ox in range(w * factor):
            sy = min(max((oy + 0.5) / factor - 0.5, 0.0), h - 1)
            sx = min(max((ox + 0.5) / factor - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[oy, ox] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def gradcheck(fn, inputs, rng, tol=1e-3):
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape():
        out = fn(*tensors)
        weights = Tensor(rng.standard_normal(out.shape))
        loss = T.sum(T.mul(out, weights))
    backward(loss)

    def f():
        return float(np.sum(fn(*tensors).data * weights.data))

    for t in tensors:
        for idx in np.ndindex(t.shape):
            num = numeric_grad(f, t.data, idx)
            err = rel_err(t.grad[idx], num)
            assert err < tol, f"grad mismatch at {idx}: {t.grad[idx]} vs {num}"


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))

    def test_gradient(self, rng):
        gradcheck(T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], rng)


class TestConv2d:
    def test_scalar_kernel(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), 1, 0)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_output_shape(self):
        out = T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), 1, 0)
        assert out.shape == (1, 2, 2)

    def test_matches_naive_reference(self, rng):
        x = rng.standard_normal((1, 5, 5))
        k = rng.standard_normal((2, 1, 3, 3))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), 1, 0).data, naive_conv2d(x, k, 1, 0), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("c_in,size,k,stride,pad", [
        (1, 3, 3, 1, 0), (2, 8, 3, 1, 1), (3, 8, 3, 2, 1), (3, 7, 1, 2, 0), (2, 6, 5, 1, 2), (3, 8, 3, 3, 0),
    ])
    def test_matches_naive_sweep(self, rng, c_in, size, k, stride, pad):
        x = rng.standard_normal((c_in, size, size))
        w = rng.standard_normal((2, c_in, k, k))
        got = T.conv2d(Tensor(x), Tensor(w), stride, pad).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, stride, pad), atol=1e-12, rtol=0)

    def test_bias(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        got = T.conv2d(Tensor(x), Tensor(w), 1, 1, bias=Tensor(b)).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, 1, 1) + b[:, None, None], atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_zero_stride(self):
        with pytest.raises(InvalidParam):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_gradient(self, rng, stride, pad):
        gradcheck(
            lambda x, k, b: T.conv2d(x, k, stride, pad, bias=b),
            [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
            rng,
        )


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0]), 0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_values(self):
        out = T.softmax(Tensor([1.0, 2.0, 3.0]), 0).data
        np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_bad_axis(self):
        with pytest.raises(InvalidParam):
            T.softmax(Tensor(np.zeros((2, 3))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        out = T.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out > 0)
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, out, atol=1e-9)

    def test_gradient(self, rng):
        gradcheck(lambda x: T.softmax(x, 1), [rng.standard_normal((3, 4))], rng)


class TestElementwise:
    def test_mul_identity(self, rng):
        m = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.elementwise("mul", Tensor(np.ones((2, 3))), Tensor(m)).data, m)

    def test_sigmoid_zero(self):
        assert T.elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_no_broadcasting(self):
        with pytest.raises(ShapeMismatch):
            T.elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_gelu_tanh_form(self):
        x = np.array([-2.0, -0.5, 0.0, 0.7, 3.0])
        ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_binary_gradient(self, rng, op):
        gradcheck(lambda a, b: T.elementwise(op, a, b), [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))], rng)

    @pytest.mark.parametrize("op", ["relu", "gelu", "sigmoid"])
    def test_unary_gradient(self, rng, op):
        x = rng.standard_normal((4, 3))
        x[np.abs(x) < 1e-2] = 0.5  # stay off the relu kink
        gradcheck(lambda a: T.elementwise(op, a), [x], rng)


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layernorm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_values(self):
        out = T.layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_zero_gamma(self, rng):
        b = np.array([0.5, -1.0, 2.0])
        out = T.layernorm(Tensor(rng.standard_normal((4, 3))), Tensor(np.zeros(3)), Tensor(b), 1e-5)
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_normalized_rows(self, rng):
        out = T.layernorm(Tensor(rng.standard_normal((5, 8)) * 3 + 2), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-12)
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("eps", [0.0, -1e-5])
    def test_bad_eps(self, eps):
        with pytest.raises(InvalidParam):
            T.layernorm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps)

    def test_gradient(self, rng):
        gradcheck(
            lambda x, g, b: T.layernorm(x, g, b, 1e-5),
            [rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)],
            rng,
        )


class TestUpsample:
    def test_factor_one(self, rng):
        x = rng.standard_normal((2, 3, 3))
        np.testing.assert_array_equal(T.upsample_bilinear(Tensor(x), 1).data, x)

    @pytest.mark.parametrize("factor", [2, 3, 4])
    def test_constant(self, factor):
        out = T.upsample_bilinear(Tensor(np.full((1, 3, 2), 7.25)), factor).data
        np.testing.assert_allclose(out, 7.25, atol=1e-12)

    def test_2x2_matches_pixel_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.upsample_bilinear(Tensor(x[None]), 2).data[0]
        np.testing.assert_allclose(out, pixel_bilinear(x, 2), atol=1e-12, rtol=0)
        np.testing.assert_allclose(out[0], [1.0, 1.25, 1.75, 2.0], atol=1e-12)

    @pytest.mark.parametrize("factor", [2, 3, 8])
    def test_random_matches_pixel_oracle(self, rng, factor):
        x = rng.standard_normal((4, 5))
        out = T.upsample_bilinear(Tensor(x[None]), factor).data[0]
        np.testing.assert_allclose(out, pixel_bilinear(x, factor), atol=1e-12, rtol=0)

    def test_factor_zero(self):
        with pytest.raises(InvalidParam):
            T.upsample_bilinear(Tensor(np.zeros((1, 2, 2))), 0)

    def test_gradient(self, rng):
        gradcheck(lambda x: T.upsample_bilinear(x, 2), [rng.standard_normal((2, 3, 4))], rng)


class TestShapeOps:
    def test_reshape_transpose_gradient(self, rng):
        gradcheck(lambda x: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [rng.standard_normal((6, 4))], rng)

    def test_getitem_gradient(self, rng):
        gradcheck(lambda x: x[:, 1:3], [rng.standard_normal((3, 5))], rng)

    def test_concat_gradient(self, rng):
        gradcheck(
            lambda a, b: T.concat([a, b], axis=0),
            [rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))],
            rng,
        )

    def test_expand_gradient(self, rng):
        gradcheck(lambda b: T.expand(b, (4, 2, 3)), [rng.standard_normal((2, 1))], rng)

    def test_reductions_gradient(self, rng):
        gradcheck(lambda x: T.mean(x, axis=(1, 2), keepdims=True), [rng.standard_normal((2, 3, 3))], rng)
        gradcheck(lambda x: T.max(x, axis=0, keepdims=True), [rng.standard_normal((3, 4, 4))], rng)

    def test_div_gradient(self, rng):
        gradcheck(T.div, [rng.standard_normal((2, 3)), rng.uniform(0.5, 2.0, (2, 3))], rng)

    def test_bce_gradient(self, rng):
        y = (rng.random((1, 4, 4)) > 0.5).astype(float)
        gradcheck(lambda z: T.bce_with_logits(z, y), [rng.standard_normal((1, 4, 4)) * 3], rng)

    def test_bce_matches_definition(self, rng):
        z = rng.standard_normal((1, 3, 3))
        y = (rng.random((1, 3, 3)) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-z))
        ref = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        np.testing.assert_allclose(T.bce_with_logits(Tensor(z), y).data, ref, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        with Tape():
            loss = T.sum(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = T.sum(T.mul(x, x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = T.mul(x, x)
        with pytest.raises(NotScalar):
            backward(y)

    def test_tape_is_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        assert len(tape.nodes) == 2
        backward(loss)
        assert tape.consumed and not tape.nodes
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.sum(T.mul(x, x))
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_no_grad_suspends_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with T.no_grad():
                T.mul(x, x)
        assert tape.nodes == []

    def test_topological_order(self, rng):
        a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with Tape() as tape:
            b = T.relu(T.matmul(a, a))
            T.sum(T.add(b, a))
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                assert inp._tape is None or id(inp) in produced
            produced.add(id(node.output))

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            y = T.mul(x, x)
            loss = T.sum(T.add(y, y))
        backward(loss)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_deterministic(self, rng):
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        r1 = T.softmax(T.matmul(Tensor(a), Tensor(b)), 1).data
        r2 = T.softmax(T.matmul(Tensor(a), Tensor(b)), 1).data
        assert r1.tobytes() == r2.tobytes()
