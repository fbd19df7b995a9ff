import math
import os
import subprocess
import sys

import numpy as np
import pytest
from gradcheck import max_rel_error
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paam import _kernels, ops
from paam.tensor import ShapeError, Tensor


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


# -- spec examples -------------------------------------------------------------


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(ops.matmul(eye, b).data, b.data)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_is_ones_times_bt():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = rng.normal(size=(5, 3))
    ops.matmul(a, Tensor(b)).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.T, rtol=1e-12)
    assert max_rel_error(ops.matmul, [a.data, b], rng) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_examples():
    out = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[9.0]]]
    rng = np.random.default_rng(1)
    z = ops.conv2d(Tensor(rng.normal(size=(2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), 1, 1)
    assert np.all(z.data == 0)


def test_conv_gradient_example():
    rng = np.random.default_rng(2)
    fn = lambda x, w: ops.conv2d(x, w, 1, 1)  # noqa: E731
    assert max_rel_error(fn, [rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))], rng) < 1e-4


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError, match="larger than padded input"):
        ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_naive_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), stride, pad).data, naive_conv(x, w, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_zero_filters_and_channels():
    out = ops.conv2d(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((0, 3, 3, 3))), 1, 1)
    assert out.shape == (2, 0, 4, 4)


def test_pointwise_examples():
    rng = np.random.default_rng(3)
    maps = rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal(ops.pointwise_mul_broadcast(Tensor(np.ones(2)), Tensor(maps)).data, maps)
    assert np.all(ops.pointwise_mul_broadcast(Tensor(np.zeros(2)), Tensor(maps)).data == 0)
    out = ops.pointwise_mul_broadcast(Tensor([0.5, 2.0]), Tensor(np.array([[[3.0]], [[7.0]]])))
    assert out.data.ravel().tolist() == [1.5, 14.0]
    with pytest.raises(ShapeError):
        ops.pointwise_mul_broadcast(Tensor(np.ones(3)), Tensor(maps))


def test_reduce_mean_rows_examples():
    assert ops.reduce_mean_rows(Tensor([[1.0, 3.0], [5.0, 7.0]])).data.tolist() == [2.0, 6.0]
    assert np.all(ops.reduce_mean_rows(Tensor(np.zeros((3, 3)))).data == 0)
    m = np.random.default_rng(4).normal(size=(6, 6))
    ref = [sum(row) / 6 for row in m.tolist()]
    np.testing.assert_allclose(ops.reduce_mean_rows(Tensor(m)).data, ref, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError, match="rank"):
        ops.reduce_mean_rows(Tensor(np.ones(3)))


def test_small_op_examples():
    assert ops.l1_norm(Tensor([-1.0, 2.0, -3.0])).item() == 6.0
    assert ops.cross_entropy(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-15)
    x = Tensor(np.array([-1.0, 1.0]), requires_grad=True)
    ops.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError, match="label 4"):
        ops.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((1, 4))), [-1])


def test_cross_entropy_stable_for_large_logits():
    z = np.array([[1000.0, 0.0, -1000.0]])
    loss = ops.cross_entropy(Tensor(z), [0]).item()
    assert loss == 0.0
    assert math.isfinite(ops.cross_entropy(Tensor(z), [2]).item())


def test_channel_norm_matches_formula():
    rng = np.random.default_rng(5)
    x, g, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    out = ops.channel_norm(Tensor(x), Tensor(g), Tensor(b), mean, var).data
    ref = g[None, :, None, None] * (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) \
        + b[None, :, None, None]
    np.testing.assert_allclose(out, ref, rtol=1e-13)
    # One sample's output does not depend on the rest of the batch.
    single = ops.channel_norm(Tensor(x[:1]), Tensor(g), Tensor(b), mean, var).data
    np.testing.assert_array_equal(single, out[:1])


def test_shortcut_pad_layout():
    x = np.arange(2 * 2 * 4 * 4, dtype=float).reshape(2, 2, 4, 4)
    out = ops.shortcut_pad(Tensor(x), 2, 5).data
    assert out.shape == (2, 5, 2, 2)
    np.testing.assert_array_equal(out[:, :2], x[:, :, ::2, ::2])
    assert np.all(out[:, 2:] == 0)
    with pytest.raises(ShapeError):
        ops.shortcut_pad(Tensor(x), 1, 1)


def test_leaky_2sigmoid_continuous_at_zero():
    y = ops.leaky_2sigmoid(Tensor(np.array([-1e-12, 0.0, 1e-12])), 0.01).data
    np.testing.assert_allclose(y, 1.0, atol=1e-12)


def test_flatten_and_linear():
    x = np.arange(24.0).reshape(2, 3, 2, 2)
    assert ops.flatten(Tensor(x)).shape == (2, 12)
    w, b = np.ones((3, 12)), np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ops.linear(ops.flatten(Tensor(x)), Tensor(w), Tensor(b)).data,
                                  x.reshape(2, 12).sum(1, keepdims=True) + b)
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((2, 4))), Tensor(w))


# -- kernels -------------------------------------------------------------------


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba path disabled")
@pytest.mark.parametrize("shape,k,s,p", [((2, 3, 7, 5), 3, 1, 1), ((1, 4, 8, 8), 3, 2, 1), ((3, 2, 5, 5), 1, 1, 0),
                                         ((1, 1, 6, 6), 5, 2, 2)])
def test_numba_and_numpy_kernels_agree(shape, k, s, p):
    x = np.random.default_rng(0).normal(size=shape)
    cols = _kernels.im2col_numpy(x, k, s, p)
    assert np.array_equal(cols, _kernels.im2col_numba(x, k, s, p))
    np.testing.assert_allclose(_kernels.col2im_numba(cols, shape, k, s, p),
                               _kernels.col2im_numpy(cols, shape, k, s, p), rtol=1e-13, atol=1e-13)


def test_env_flag_selects_numpy_backend():
    env = {**os.environ, "PAAM_DISABLE_NUMBA": "1"}
    code = "from paam import _kernels as k; print(k.BACKEND, k.im2col is k.im2col_numpy)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 6, 5))
    cols = _kernels.im2col(x, 3, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * _kernels.col2im(y, x.shape, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- properties ----------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 5, 5), elements=finite), arrays(np.float64, (3, 2, 3, 3), elements=finite),
       st.floats(-3, 3))
def test_conv_is_linear_in_input(x, w, alpha):
    a = ops.conv2d(Tensor(alpha * x), Tensor(w), 1, 1).data
    b = alpha * ops.conv2d(Tensor(x), Tensor(w), 1, 1).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_cross_entropy_gradient_rows_sum_to_zero(z):
    t = Tensor(z.reshape(1, -1), requires_grad=True)
    ops.cross_entropy(t, [0]).backward()
    assert abs(t.grad.sum()) < 1e-12
    assert ops.cross_entropy(Tensor(z.reshape(1, -1)), [0]).item() >= 0


@settings(max_examples=100, deadline=None)
@given(st.floats(-700, 1e6, allow_nan=False), st.floats(1e-4, 1.0))
def test_leaky_expo_positive_with_positive_slope(x, a):
    t = Tensor(np.array([x]), requires_grad=True)
    y = ops.leaky_expo(t, a)
    y.backward(np.ones(1))
    assert y.data[0] > 0 and t.grad[0] > 0


def test_relu_propagates_nan():
    out = ops.relu(Tensor(np.array([np.nan, -1.0, 2.0]))).data
    assert np.isnan(out[0]) and out[1:].tolist() == [0.0, 2.0]
