"""Autodiff engine tests: forward semantics, chain rule, structural ops."""

import numpy as np
import pytest

from gazeredirect.gradcheck import check_gradients
from gazeredirect.tensor import GraphError, Tensor, concat, conv2d, resample_nearest


def test_identity_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 1, 5, 7)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = conv2d(x, k, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_sliding_window():
    # hand-enumerated 3x3 sliding window over a 4x4 field of ones: every
    # output position sums 9 ones
    x = Tensor(np.ones((1, 1, 4, 4)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 9.0))


def test_conv_output_shape_stride2_pad1():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    k = Tensor(np.zeros((16, 3, 3, 3)))
    assert conv2d(x, k, stride=2, padding=1).shape == (1, 16, 4, 4)


def test_conv_matches_naive_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float64)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float64)
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (6 + 2 * pad - 3) // stride + 1
    ow = (5 + 2 * pad - 3) // stride + 1
    expected = np.zeros((2, 4, oh, ow))
    for b in range(2):
        for co in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                    expected[b, co, i, j] = (patch * k[co]).sum()
    out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride, pad)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_conv_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    k = Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ValueError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
        conv2d(x, k)


def test_backward_square_sum():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_backward_constant_loss_leaves_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    loss = y.sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        (x * 2.0).backward()


def test_backward_on_detached_tensor_errors():
    x = Tensor([2.0])
    with pytest.raises(GraphError, match="detached"):
        x.backward()
    y = Tensor([2.0], requires_grad=True)
    with pytest.raises(GraphError, match="detached"):
        (y * 3.0).detach().backward()


def test_three_layer_stack_finite_difference():
    # analytic vs central differences at 1e-4 in float64, every parameter
    from gazeredirect.gradcheck import _suite_cases

    for seed in (0, 1, 2):
        func, tensors = _suite_cases(seed)["three_layer_stack"]
        errors = check_gradients(func, tensors)
        assert max(errors.values()) < 1e-3, errors


def test_backward_linearity():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True, dtype=np.float64)

    def losses():
        l1 = (x * x).sum()
        l2 = x.tanh().sum()
        return l1, l2

    a, b = 1.7, -0.4
    l1, l2 = losses()
    (a * l1 + b * l2).backward()
    combined = x.grad.copy()

    x.zero_grad()
    l1, _ = losses()
    l1.backward()
    g1 = x.grad.copy()
    x.zero_grad()
    _, l2 = losses()
    l2.backward()
    g2 = x.grad.copy()
    np.testing.assert_allclose(combined, a * g1 + b * g2, rtol=1e-12, atol=1e-12)


def test_shared_node_accumulates_once_per_use():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    loss = (y + y).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_nonfinite_forward_is_an_error():
    x = Tensor([1.0, 0.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        x ** -1.0


def test_concat_shapes_and_identity():
    a = Tensor(np.ones((1, 2, 4, 4)))
    b = Tensor(np.zeros((1, 3, 4, 4)))
    out = concat([a, b], axis=1)
    assert out.shape == (1, 5, 4, 4)
    single = concat([a], axis=1)
    np.testing.assert_array_equal(single.data, a.data)


def test_concat_mismatched_extent_errors():
    a = Tensor(np.ones((1, 2, 4, 4)))
    b = Tensor(np.zeros((1, 3, 4, 5)))
    with pytest.raises(ValueError, match="concat"):
        concat([a, b], axis=1)


def test_concat_backward_routes_ones_everywhere():
    a = Tensor(np.random.default_rng(1).standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(np.random.default_rng(2).standard_normal((1, 4, 3, 3)), requires_grad=True)
    concat([a, b], axis=1).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_resample_identity_and_block_replication():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 1, 6, 6)))
    np.testing.assert_array_equal(resample_nearest(x, 6, 6).data, x.data)

    checker = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    up = resample_nearest(checker, 4, 4)
    expected = np.array(
        [[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=np.float32
    )
    np.testing.assert_array_equal(up.data, expected)


def test_resample_gazemap_shape_and_channels():
    x = Tensor(np.zeros((1, 2, 64, 64)))
    out = resample_nearest(x, 8, 8)
    assert out.shape == (1, 2, 8, 8)


def test_resample_zero_extent_errors():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError, match="positive"):
        resample_nearest(x, 0, 4)


def test_ops_are_deterministic():
    rng = np.random.default_rng(11)
    data = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    kdata = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        k = Tensor(kdata.copy(), requires_grad=True)
        loss = conv2d(x, k, stride=2, padding=1).tanh().sum()
        loss.backward()
        return loss.item(), x.grad.copy(), k.grad.copy()

    first, second = run(), run()
    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])
    np.testing.assert_array_equal(first[2], second[2])


def test_mean_and_broadcast_add():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
    bias = Tensor(np.ones((1, 4)), requires_grad=True)
    loss = (x + bias).mean()
    loss.backward()
    np.testing.assert_allclose(x.grad, np.full((3, 4), 1 / 12), rtol=1e-6)
    np.testing.assert_allclose(bias.grad, np.full((1, 4), 3 / 12), rtol=1e-6)
