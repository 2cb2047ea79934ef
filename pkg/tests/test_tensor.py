import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catcnn import tensor as T
from catcnn.tensor import ShapeError, Tensor


def naive_conv(x, w, b, dilation):
    """Direct six-loop cross-correlation with zero 'same' padding."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    r = (k // 2) * dilation
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            y = i - r + u * dilation
                            xx = j - r + v * dilation
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[o, c, u, v] * x[c, y, xx]
                out[o, i, j] = acc
    return out


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# conv2d


@pytest.mark.parametrize("dilation", [1, 2, 3, 4])
@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_naive_oracle(dilation, k):
    rng = np.random.default_rng(dilation * 10 + k)
    x = rng.normal(size=(3, 7, 9))
    w = rng.normal(size=(2, 3, k, k))
    b = rng.normal(size=2)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, dilation), rtol=1e-12, atol=1e-12)


def test_conv_identity_kernel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    x = np.ones((1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data
    assert np.array_equal(out, x)


def test_conv_all_ones_kernel_padding():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data
    assert out[0, 1, 1] == 9.0
    assert out[0, 0, 0] == 4.0


def test_dilated_delta_response():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), dilation=2).data[0]
    expected = np.zeros((5, 5))
    for r in (0, 2, 4):
        for c in (0, 2, 4):
            expected[r, c] = 1.0
    assert np.array_equal(out, expected)


def test_conv_rejects_bad_arguments():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), dilation=0)
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 12),
    w=st.integers(1, 12),
    d=st.integers(1, 5),
    seed=st.integers(0, 2**16),
)
def test_conv_preserves_extent(h, w, d, seed):
    rng = np.random.default_rng(seed)
    out = T.conv2d(Tensor(rng.normal(size=(2, h, w))), Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)), d)
    assert out.shape == (3, h, w)


# pooling


def test_maxpool_examples():
    assert T.maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    assert T.maxpool2(Tensor(x)).data.tolist() == [[[5.0, 7.0], [13.0, 15.0]]]


def test_maxpool_tie_goes_to_first_element():
    x = leaf(np.full((1, 4, 4), 3.0))
    out = T.maxpool2(x)
    assert np.all(out.data == 3.0)
    T.backward(T.tensor_sum(out))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0], expected)


def test_maxpool_odd_extent_uses_ceil():
    x = np.arange(15, dtype=float).reshape(1, 3, 5)
    out = T.maxpool2(Tensor(x)).data
    assert out.shape == (1, 2, 3)
    assert out[0].tolist() == [[6.0, 8.0, 9.0], [11.0, 13.0, 14.0]]


def test_adaptive_max_pool_examples():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    assert T.adaptive_max_pool(Tensor(x), 2, 2).data.tolist() == [[[5.0, 7.0], [13.0, 15.0]]]
    rng = np.random.default_rng(1)
    y = rng.normal(size=(2, 5, 6))
    np.testing.assert_array_equal(T.adaptive_max_pool(Tensor(y), 1, 1).data[:, 0, 0], y.max(axis=(1, 2)))


def test_adaptive_max_pool_brute_force_windows():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 7, 9))
    out = T.adaptive_max_pool(Tensor(x), 4, 4).data
    assert out.shape == (1, 4, 4)
    for i in range(4):
        for j in range(4):
            r0, r1 = (i * 7) // 4, ((i + 1) * 7) // 4
            c0, c1 = (j * 9) // 4, ((j + 1) * 9) // 4
            assert out[0, i, j] == x[0, r0:r1, c0:c1].max()


def test_adaptive_max_pool_rejects_upsampling():
    with pytest.raises(ValueError):
        T.adaptive_max_pool(Tensor(np.zeros((1, 2, 2))), 3, 3)


def test_avg_pool_all():
    assert T.avg_pool_all(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [2.5]
    assert np.all(T.avg_pool_all(Tensor(np.full((3, 5, 2), 1.5))).data == 1.5)


@pytest.mark.parametrize("hw", [(1, 1), (3, 2), (7, 9), (33, 21)])
def test_ama_composition_is_one_value_per_channel(hw):
    x = Tensor(np.random.default_rng(0).normal(size=(4, *hw)))
    v = T.avg_pool_all(T.adaptive_max_pool(x, min(hw[0], 4), min(hw[1], 4)))
    assert v.shape == (4,)


# elementwise


def test_relu_prelu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.prelu(Tensor([-2.0, 3.0]), Tensor([0.25])).data.tolist() == [-0.5, 3.0]


def test_prelu_slope_gradient():
    slope = leaf([0.25])
    T.backward(T.tensor_sum(T.prelu(Tensor([-2.0, 3.0]), slope)))
    assert slope.grad.tolist() == [-2.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_sigmoid_range(vals):
    out = T.sigmoid(Tensor(vals)).data
    assert np.all(np.isfinite(out))
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    small = np.abs(np.asarray(vals)) < 30
    assert np.all((out[small] > 0.0) & (out[small] < 1.0))


def test_linear_examples():
    out = T.linear(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 1.0]))
    assert out.data.tolist() == [3.0, 8.0]
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_linear_weight_gradient_is_outer_product():
    rng = np.random.default_rng(3)
    x = rng.normal(size=4)
    W = leaf(rng.normal(size=(3, 4)))
    up = rng.normal(size=3)
    out = T.linear(Tensor(x), W, Tensor(np.zeros(3)))
    T.backward(T.tensor_sum(T.mul_elementwise(out, Tensor(up))))
    np.testing.assert_allclose(W.grad, np.outer(up, x), rtol=1e-14)


def test_concat_and_split():
    a, b = leaf(np.ones((2, 3, 3))), leaf(np.zeros((3, 3, 3)))
    out = T.concat_channels(a, b)
    assert out.shape == (5, 3, 3)
    assert np.array_equal(out.data[:2], a.data)
    T.backward(T.tensor_sum(out))
    assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)
    left, right = T.split_channels(Tensor(out.data), 2)
    assert left.shape == (2, 3, 3) and right.shape == (3, 3, 3)


def test_mul_elementwise_examples():
    a, b = leaf([2.0, 3.0]), Tensor([4.0, 5.0])
    out = T.mul_elementwise(a, b)
    assert out.data.tolist() == [8.0, 15.0]
    T.backward(T.tensor_sum(out))
    assert a.grad.tolist() == [4.0, 5.0]
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    assert np.all(T.mul_elementwise(Tensor(x), Tensor(np.zeros((2, 3, 3)))).data == 0.0)
    assert np.array_equal(T.mul_elementwise(Tensor(x), Tensor(np.ones((2, 3, 3)))).data, x)


def test_mul_elementwise_broadcast_single_channel():
    a = leaf(np.ones((3, 2, 2)))
    b = leaf(np.full((1, 2, 2), 2.0))
    T.backward(T.tensor_sum(T.mul_elementwise(a, b)))
    assert np.all(b.grad == 3.0)
    with pytest.raises(ShapeError):
        T.mul_elementwise(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((2, 2, 2))))


# backward


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tensor_sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]

    x = leaf([-1.0, 2.0])
    T.backward(T.tensor_sum(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]

    v = np.array([0.5, -1.5, 2.0])
    x = leaf(v)
    T.backward(T.tensor_sum(T.mul_elementwise(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * v)


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(x))
    T.backward(T.tensor_sum(x))
    assert x.grad.tolist() == [2.0, 2.0]
    x.zero_grad()
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(leaf([1.0, 2.0]))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    # y = x*x + 3x feeds x through two paths
    x = leaf([1.5])
    y = T.add(T.mul_elementwise(x, x), T.scale(x, 3.0))
    T.backward(T.tensor_sum(y))
    assert x.grad.tolist() == [2 * 1.5 + 3.0]


# grad_check examples


def test_grad_check_linear():
    rng = np.random.default_rng(4)
    x, W, b = Tensor(rng.normal(size=4)), leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=3))
    up = Tensor(rng.normal(size=3))
    assert T.grad_check(lambda: T.tensor_sum(T.mul_elementwise(T.linear(x, W, b), up)), W) < 1e-6


def test_grad_check_dilated_conv():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2, 9, 9)))
    w = leaf(rng.normal(size=(2, 2, 3, 3)))
    b = Tensor(rng.normal(size=2))
    up = Tensor(rng.normal(size=(2, 9, 9)))

    def f():
        return T.tensor_sum(T.mul_elementwise(T.conv2d(x, w, b, 3), up))

    assert T.grad_check(f, x) < 1e-5
    assert T.grad_check(f, w) < 1e-5


def test_grad_check_prelu_away_from_zero():
    rng = np.random.default_rng(6)
    x = leaf(rng.uniform(0.2, 1.0, 8) * rng.choice([-1, 1], 8))
    a = leaf([0.25])
    up = Tensor(rng.normal(size=8))

    def f():
        return T.tensor_sum(T.mul_elementwise(T.prelu(x, a), up))

    assert T.grad_check(f, x) < 1e-6
    assert T.grad_check(f, a) < 1e-6


def test_gradient_suite_passes():
    from catcnn import gradsuite

    worst = gradsuite.run_suite(seed=11, instances=2, include_model=False)
    assert max(worst.values()) < gradsuite.THRESHOLD, worst
