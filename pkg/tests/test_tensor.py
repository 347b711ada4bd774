import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hbpool import tensor as T
from hbpool.tensor import ShapeError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                c[i, j] += a[i, p] * b[p, j]
    return c


def naive_conv(x, k, stride, pad):
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, ci] * k[di, dj, ci, o]
                out[i, j, o] = acc
    return out


def test_tensor_constructor_checks_size():
    t = T.tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
    assert t.shape == (2, 3) and t.dtype == np.float64
    with pytest.raises(ShapeError):
        T.tensor([1, 2, 3], shape=(2, 2))
    with pytest.raises(ShapeError):
        T.tensor([], shape=(0,))


def test_matmul_small_cases():
    np.testing.assert_array_equal(T.matmul(np.eye(2), T.tensor([[3], [4]])), [[3], [4]])
    np.testing.assert_array_equal(T.matmul(T.tensor([[1, 2]]), T.tensor([[3], [4]])), [[11]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_hadamard():
    np.testing.assert_array_equal(T.hadamard(T.tensor([1, 2, 3]), np.zeros(3)), [0, 0, 0])
    np.testing.assert_array_equal(T.hadamard(T.tensor([1, 2, 3]), np.ones(3)), [1, 2, 3])
    np.testing.assert_array_equal(T.hadamard(T.tensor([1, 2]), T.tensor([3, 6])), [3, 12])
    with pytest.raises(ShapeError):
        T.hadamard(np.ones(2), np.ones(3))


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 2)), np.ones(2))
    with pytest.raises(ShapeError):
        T.sub(np.ones((2, 1)), np.ones((1, 2)))


def test_sum_over_spatial():
    np.testing.assert_array_equal(T.sum_over_spatial(np.zeros((2, 2, 3))), [0, 0, 0])
    v = np.array([[[1.5, -2.0, 3.0]]])
    np.testing.assert_array_equal(T.sum_over_spatial(v), v[0, 0])
    np.testing.assert_array_equal(T.sum_over_spatial(T.tensor([[[1], [2]], [[3], [4]]])), [10])
    with pytest.raises(ShapeError):
        T.sum_over_spatial(np.ones((2, 2)))


def test_conv2d_identity_and_zero_kernels():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4, 1))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))), x)
    out = T.conv2d(rng.normal(size=(6, 6, 2)), np.zeros((3, 3, 2, 4)), 1, 1)
    np.testing.assert_array_equal(out, np.zeros((6, 6, 4)))


@pytest.mark.parametrize("size,stride,pad", [(6, 1, 0), (6, 1, 1), (7, 2, 1), (6, 3, 0)])
def test_conv2d_matches_nested_loops(size, stride, pad):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(size, size, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    np.testing.assert_allclose(T.conv2d(x, k, stride, pad), naive_conv(x, k, stride, pad), rtol=0, atol=1e-12)


def test_conv2d_batched_equals_per_sample():
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(3, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    batched = T.conv2d(xs, k, 1, 1)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], T.conv2d(xs[i], k, 1, 1))


def test_conv2d_errors():
    with pytest.raises(ShapeError, match="integral"):
        T.conv2d(np.ones((6, 6, 1)), np.ones((3, 3, 1, 1)), stride=2, pad=0)
    with pytest.raises(ShapeError, match="odd"):
        T.conv2d(np.ones((6, 6, 1)), np.ones((2, 2, 1, 1)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(np.ones((6, 6, 2)), np.ones((3, 3, 1, 1)), 1, 1)


def test_relu_scale_maxpool():
    np.testing.assert_array_equal(T.relu(T.tensor([-1, 0, 2])), [0, 0, 2])
    np.testing.assert_array_equal(T.scale(T.tensor([1, 2]), 0.5), [0.5, 1])
    out = T.maxpool2(np.full((4, 6, 3), 2.5))
    assert out.shape == (2, 3, 3)
    np.testing.assert_array_equal(out, 2.5)
    with pytest.raises(ShapeError):
        T.maxpool2(np.ones((3, 4, 1)))


def test_maxpool_argmax_and_backward_route():
    x = np.array([[1.0, 5.0], [3.0, 2.0]])[..., None]
    out, idx = T.maxpool2(x, return_argmax=True)
    assert out[0, 0, 0] == 5.0 and idx[0, 0, 0] == 1
    g = T.maxpool2_backward(np.ones((1, 1, 1)), idx)
    np.testing.assert_array_equal(g[..., 0], [[0, 1], [0, 0]])
    # ties resolve to the first window position
    _, tie = T.maxpool2(np.ones((2, 2, 1)), return_argmax=True)
    assert tie[0, 0, 0] == 0


def test_normalization_kernels():
    np.testing.assert_allclose(T.l2_normalize(T.signed_sqrt(T.tensor([-9, 16]))), [-0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(T.l2_normalize(np.zeros(4)), np.zeros(4))


small = st.integers(1, 5)
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), small, small, small, small)
def test_matmul_associative(seed, m, k, n, p):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
    left = T.matmul(T.matmul(a, b), c)
    right = T.matmul(a, T.matmul(b, c))
    scale = np.abs(a) @ np.abs(b) @ np.abs(c)
    assert np.all(np.abs(left - right) <= 1e-10 * scale)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(*[arrays(np.float64, n, elements=finite)] * 3)))
def test_hadamard_commutes_and_distributes(abc):
    a, b, c = abc
    np.testing.assert_array_equal(T.hadamard(a, b), T.hadamard(b, a))
    np.testing.assert_allclose(T.hadamard(a, T.add(b, c)), T.add(T.hadamard(a, b), T.hadamard(a, c)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), small, small, small, small)
def test_sum_pool_commutes_with_linear_maps(seed, h, w, c, d):
    rng = np.random.default_rng(seed)
    x, a = rng.normal(size=(h, w, c)), rng.normal(size=(c, d))
    lhs = T.sum_over_spatial(T.project(x, a))
    rhs = T.project(T.sum_over_spatial(x), a)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), small, small, small)
def test_identity_1x1_conv_is_exact(seed, h, w, c):
    x = np.random.default_rng(seed).normal(size=(h, w, c))
    k = np.eye(c).reshape(1, 1, c, c)
    np.testing.assert_array_equal(T.conv2d(x, k), x)
