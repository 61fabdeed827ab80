import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from listennet import tensor as T
from listennet.errors import ShapeError


@pytest.mark.parametrize("shape, fill, expected", [
    ((1, 1, 1, 3), 0.0, [0, 0, 0]),
    ((2, 1, 1, 2), 1.5, [1.5, 1.5, 1.5, 1.5]),
])
def test_tensor_new_fill(shape, fill, expected):
    t = T.tensor_new(shape, fill)
    assert t.shape == shape
    np.testing.assert_array_equal(t.reshape(-1), expected)


def test_tensor_new_empty_keeps_shape():
    t = T.tensor_new((0, 4, 4, 4), 7.0)
    assert t.shape == (0, 4, 4, 4) and t.size == 0


@pytest.mark.parametrize("shape", [(1, 2, 3), (-1, 1, 1, 1)])
def test_tensor_new_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        T.tensor_new(shape)


@given(st.tuples(*[st.integers(1, 5)] * 4), st.data())
def test_offset_index_roundtrip(shape, data):
    off = data.draw(st.integers(0, math.prod(shape) - 1))
    idx = T.index_of(shape, off)
    assert T.offset_of(shape, *idx) == off
    assert np.ravel_multi_index(idx, shape) == off


def test_matmul_examples():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    np.testing.assert_array_equal(T.matmul_batched(np.eye(2)[None, None], b), b)
    out = T.matmul_batched(np.array([[[[1.0, 2.0]]]]), np.array([[[[3.0], [4.0]]]]))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 11.0
    a = np.array([2.0, 3.0]).reshape(2, 1, 1, 1)
    c = np.array([5.0, 7.0]).reshape(2, 1, 1, 1)
    np.testing.assert_array_equal(T.matmul_batched(a, c).reshape(-1), [10.0, 21.0])


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        T.matmul_batched(np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3)))


def test_concat_depth():
    a, b = np.zeros((1, 2, 1, 3)), np.ones((1, 2, 1, 3))
    out = T.concat_depth([a, b])
    assert out.shape == (1, 4, 1, 3)
    assert np.all(out[:, :2] == 0) and np.all(out[:, 2:] == 1)
    np.testing.assert_array_equal(T.concat_depth([a]), a)
    parts = [np.zeros((1, 4, 64, 117))] * 4
    assert T.concat_depth(parts).shape == (1, 16, 64, 117)
    with pytest.raises(ShapeError):
        T.concat_depth([a, np.zeros((1, 2, 2, 3))])


def test_slice_time_last():
    x = np.arange(1.0, 6.0).reshape(1, 1, 1, 5)
    np.testing.assert_array_equal(T.slice_time_last(x, 3).reshape(-1), [3, 4, 5])
    np.testing.assert_array_equal(T.slice_time_last(x, 5), x)
    assert T.slice_time_last(np.zeros((1, 16, 64, 121)), 117).shape == (1, 16, 64, 117)
    with pytest.raises(ShapeError):
        T.slice_time_last(x, 6)


def test_slice_backward_is_adjoint(rng):
    x = rng.standard_normal((2, 3, 4, 9))
    g = rng.standard_normal((2, 3, 4, 5))
    lhs = np.sum(T.slice_time_last(x, 5) * g)
    rhs = np.sum(x * T.slice_time_last_backward(g, 9))
    assert lhs == pytest.approx(rhs)


def test_adaptive_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert T.adaptive_avg_pool(x, 1, 1).item() == 2.5
    np.testing.assert_array_equal(T.adaptive_avg_pool(x, 2, 2), x)
    row = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
    np.testing.assert_allclose(T.adaptive_avg_pool(row, 1, 2).reshape(-1), [1.5, 3.5])


@settings(max_examples=40)
@given(st.integers(1, 8), st.integers(1, 4))
def test_adaptive_pool_conserves_mass_on_partitions(out, factor):
    n = out * factor
    x = np.random.default_rng(n).standard_normal((1, 1, n, 3))
    pooled = T.adaptive_avg_pool(x, out, 3)
    assert pooled.sum() * factor == pytest.approx(x.sum())


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))
def test_adaptive_pool_backward_is_adjoint(h, w, oh, ow):
    oh, ow = min(oh, h), min(ow, w)
    r = np.random.default_rng(h * 100 + w)
    x = r.standard_normal((1, 2, h, w))
    g = r.standard_normal((1, 2, oh, ow))
    lhs = np.sum(T.adaptive_avg_pool(x, oh, ow) * g)
    rhs = np.sum(x * T.adaptive_avg_pool_backward(g, h, w))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_resize_examples():
    x = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
    np.testing.assert_allclose(T.linear_resize_time(x, 4).reshape(-1), [0, 0.5, 1.5, 2])
    y = np.arange(5.0).reshape(1, 1, 1, 5)
    np.testing.assert_array_equal(T.linear_resize_time(y, 5), y)
    with pytest.raises(ShapeError):
        T.linear_resize_time(np.zeros((1, 1, 2, 3)), 4)


@given(st.floats(-10, 10), st.integers(1, 20), st.integers(1, 40))
def test_resize_preserves_constants(c, w_in, w_out):
    x = np.full((1, 1, 1, w_in), c)
    np.testing.assert_allclose(T.linear_resize_time(x, w_out), c, atol=1e-12)


@given(st.integers(1, 20), st.integers(1, 40))
def test_resize_backward_is_adjoint(w_in, w_out):
    r = np.random.default_rng(w_in * 41 + w_out)
    x, g = r.standard_normal((2, 3, 1, w_in)), r.standard_normal((2, 3, 1, w_out))
    lhs = np.sum(T.linear_resize_time(x, w_out) * g)
    rhs = np.sum(x * T.linear_resize_time_backward(g, w_in))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_activation_points():
    z = np.zeros((1, 1, 1, 1))
    assert T.gelu(z).item() == 0.0
    assert T.sigmoid(z).item() == 0.5
    assert T.gelu(np.ones((1, 1, 1, 1))).item() == pytest.approx(0.8413, abs=1e-4)
    np.testing.assert_allclose(T.softmax(np.zeros((1, 1, 1, 2)), axis=3), 0.5)


def test_gelu_cdf_variant_matches():
    x = np.linspace(-6, 6, 101).reshape(1, 1, 1, -1)
    y, cdf = T.gelu_with_cdf(x)
    np.testing.assert_allclose(y, T.gelu(x), atol=1e-12)
    np.testing.assert_allclose(T.gelu_backward(x, np.ones_like(x), cdf),
                               T.gelu_backward(x, np.ones_like(x)), atol=1e-12)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_sigmoid_and_softmax_stay_finite(vals):
    x = np.array(vals, dtype=np.float64).reshape(1, 1, 1, -1)
    s = T.sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))
    p = T.softmax(x, axis=3)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_dtype_preserved():
    x = np.ones((1, 2, 3, 4), dtype=np.float32)
    for out in (T.gelu(x), T.sigmoid(x), T.softmax(x, 1), T.adaptive_avg_pool(x, 1, 2),
                T.linear_resize_time(x[:, :, :1], 7)):
        assert out.dtype == np.float32


@given(st.integers(1, 10), st.integers(1, 10))
def test_slice_plus_prefix_reconstructs(w, keep):
    keep = min(keep, w)
    x = np.random.default_rng(w).standard_normal((1, 2, 1, w))
    tail = T.slice_time_last(x, keep)
    np.testing.assert_array_equal(np.concatenate([x[..., :w - keep], tail], axis=3), x)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(vals, shift):
    x = np.array(vals).reshape(1, 1, 1, -1)
    np.testing.assert_allclose(T.softmax(x + shift, 3), T.softmax(x, 3), atol=1e-6)


@given(st.integers(2, 12), st.integers(1, 30))
def test_resize_preserves_monotonicity(w_in, w_out):
    x = np.cumsum(np.random.default_rng(w_in).uniform(0, 1, w_in)).reshape(1, 1, 1, -1)
    y = T.linear_resize_time(x, w_out).reshape(-1)
    assert np.all(np.diff(y) >= -1e-12)


def test_identity_matmul_exact(rng):
    b = rng.standard_normal((3, 1, 4, 5))
    eye = np.broadcast_to(np.eye(4), (3, 1, 4, 4)).copy()
    assert np.array_equal(T.matmul_batched(eye, b), b)
