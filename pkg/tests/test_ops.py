import numpy as np
import pytest

from oracles import conv2d_loop, conv3d_loop, maxpool_loop
from twostream import ops
from twostream.tensor import Tensor


# -- convolution -------------------------------------------------------------------


def test_conv2d_scalar_case():
    y = ops.conv2d(np.full((1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), np.array([0.5]))
    assert y.shape == (1, 1, 1) and y.data.item() == 6.5


def test_conv2d_sum_of_ones():
    y = ops.conv2d(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert y.data.item() == 9.0


def test_conv2d_matches_loop(rng):
    x = rng.normal(size=(5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(ops.conv2d(x, w, b).data, conv2d_loop(x, w, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(2, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_stride_pad_matches_loop(rng, stride, pad):
    x = rng.normal(size=(7, 7, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    got = ops.conv2d(x, w, None, stride, pad).data
    np.testing.assert_allclose(got, conv2d_loop(x, w, None, stride, pad), atol=1e-12)


def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 4, 5, 2))
    w = np.eye(2).reshape(1, 1, 1, 2, 2)
    np.testing.assert_array_equal(ops.conv3d(x, w).data, x)


def test_conv3d_ones():
    y = ops.conv3d(np.ones((3, 3, 3, 1)), np.ones((3, 3, 3, 1, 1)), np.zeros(1))
    assert y.data.item() == 27.0


def test_conv3d_matches_loop(rng):
    x = rng.normal(size=(6, 6, 5, 2))
    w = rng.normal(size=(3, 3, 3, 2, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ops.conv3d(x, w, b).data, conv3d_loop(x, w, b), atol=1e-12)


@pytest.mark.parametrize("fn,nd", [(ops.conv2d, 2), (ops.conv3d, 3)])
def test_conv_linearity(rng, fn, nd):
    shape = (5,) * nd + (2,)
    x, y = rng.normal(size=shape), rng.normal(size=shape)
    w = rng.normal(size=(3,) * nd + (2, 3))
    a, b = 0.7, -1.3
    lhs = fn(a * x + b * y, w).data
    rhs = a * fn(x, w).data + b * fn(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 4, 4, 3\).*\(3, 3, 2, 5\)"):
        ops.conv2d(np.zeros((4, 4, 3)), np.zeros((3, 3, 2, 5)))


def test_conv_kernel_too_large():
    with pytest.raises(ValueError, match="larger"):
        ops.conv2d(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))


def test_convspec_output_shape_and_check():
    spec = ops.ConvSpec((7, 7), 3, 96, (2, 2), (0, 0))
    assert spec.output_shape((224, 224)) == (109, 109, 96)
    assert spec.num_params == 7 * 7 * 3 * 96 + 96
    with pytest.raises(ValueError):
        ops.ConvSpec((0, 3), 1, 1)
    with pytest.raises(ValueError):
        ops.conv(np.zeros((5, 5, 3)), spec, np.zeros((3, 3, 3, 96)))


def test_conv_weight_grad_skipped_when_frozen(rng):
    x = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 2, 2)))
    ops.conv2d(x, w).sum().backward()
    assert w.grad is None and x.grad is not None


# -- pooling -----------------------------------------------------------------------


def test_pool_constant_input():
    y = ops.maxpool3d(np.full((4, 4, 4, 2), 1.5), 2)
    np.testing.assert_array_equal(y.data, np.full((2, 2, 2, 2), 1.5))


def test_pool_single_element_window_is_identity(rng):
    x = rng.normal(size=(3, 4, 2, 3))
    np.testing.assert_array_equal(ops.maxpool3d(x, 1).data, x)


def test_pool_global_window_is_global_max(rng):
    x = rng.normal(size=(3, 5, 4))
    np.testing.assert_array_equal(ops.maxpool2d(x, (3, 5)).data[0, 0], x.max(axis=(0, 1)))


def test_pool3d_three_stacked_channels_matches_cube_oracle(rng):
    x = rng.normal(size=(5, 5, 3, 3))
    got = ops.maxpool3d(x, 3, 1).data
    np.testing.assert_array_equal(got, maxpool_loop(x, (3, 3, 3), (1, 1, 1)))
    # channels are never mixed: each output channel only sees its own input channel
    for d in range(3):
        np.testing.assert_array_equal(got[..., d], ops.maxpool3d(x[..., d:d + 1], 3, 1).data[..., 0])


def test_pool_backward_first_maximum_on_ties():
    x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
    ops.maxpool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[..., 0], [[1, 0], [0, 0]])


def test_pool_padding_never_wins():
    x = np.full((2, 2, 1), -5.0)
    y = ops.maxpool2d(x, 3, 1, pad=1).data
    np.testing.assert_array_equal(y, np.full((2, 2, 1), -5.0))


def test_pool_window_too_large():
    with pytest.raises(ValueError, match="larger"):
        ops.maxpool2d(np.zeros((2, 2, 1)), 3)


# -- dense layers and losses -------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_fully_connected_count_and_value(rng):
    x, w, b = rng.normal(size=(2, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    np.testing.assert_allclose(ops.fully_connected(x, w, b).data, x @ w + b, atol=1e-14)
    assert ops.fully_connected(x[0], w, b).shape == (3,)
    with pytest.raises(ValueError):
        ops.fully_connected(np.zeros((2, 4)), w)


def test_softmax_constant_vector():
    np.testing.assert_allclose(ops.softmax(np.full(7, 3.2)).data, np.full(7, 1 / 7), atol=1e-15)


def test_softmax_sums_to_one(rng):
    p = ops.softmax(rng.normal(scale=20, size=(6, 9))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_closed_form_and_monotone():
    values = []
    for big in (0.0, 5.0, 20.0):
        logits = np.array([[big, 0.0, 0.0]])
        ce = ops.cross_entropy(logits, [0]).data.item()
        assert ce == pytest.approx(-np.log(np.exp(big) / (np.exp(big) + 2)), rel=1e-12)
        assert ce >= 0
        values.append(ce)
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-8


def test_hinge_hand_value():
    s = np.array([[2.0, 1.5, -1.0]])
    # margins for the two wrong classes: (1.5 + 1 - 2)_+ = 0.5, (-1 + 1 - 2)_+ = 0
    assert ops.multiclass_hinge(s, [0]).data.item() == pytest.approx(0.5)


def test_dropout_modes(rng):
    x = np.ones((1000,))
    np.testing.assert_array_equal(ops.dropout(x, 0.5, rng, training=False).data, x)
    y = ops.dropout(x, 0.5, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, rng, training=True)


def test_kernels_are_deterministic(rng):
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    a = ops.conv2d(x, w).data
    b = ops.conv2d(x.copy(), w.copy()).data
    assert a.tobytes() == b.tobytes()
