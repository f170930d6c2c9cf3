import math

import numpy as np
import pytest

from CobNet.errors import DimensionError, UsageError, ValidationError
from CobNet.tensor import (
    Graph,
    Tensor,
    adaptive_avg_pool,
    add,
    backward,
    bilinear_resize,
    channel_slice,
    concat_channels,
    conv2d,
    current_graph,
    mul,
    one_minus,
    parameter,
    relu,
    scale,
    sigmoid,
    softmax_cross_entropy,
    sub,
    tensor_sum,
)
from tests.oracles import adaptive_pool_loop, bilinear_loop, conv2d_loop, cross_entropy_loop


def numeric_grad(fn, values, step=1e-5):
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    for index in range(flat.size):
        saved = flat[index]
        flat[index] = saved + step
        upper = fn(values)
        flat[index] = saved - step
        lower = fn(values)
        flat[index] = saved
        grad.reshape(-1)[index] = (upper - lower) / (2 * step)
    return grad


def check_op_gradient(op, shape, rng):
    """Compare backward() against central differences of sum(op(x) * r)."""
    values = rng.normal(size=shape)
    probe = Tensor(rng.normal(size=op(Tensor(values)).shape))

    def loss_of(array):
        with Graph():
            return tensor_sum(mul(op(Tensor(array)), probe)).item()

    x = parameter(values)
    with Graph():
        backward(tensor_sum(mul(op(x), probe)))
    np.testing.assert_allclose(x.grad, numeric_grad(loss_of, values.copy()), rtol=1e-6, atol=1e-8)


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_delta_kernel_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        weight = np.zeros((2, 2, 3, 3))
        weight[0, 0, 1, 1] = weight[1, 1, 1, 1] = 1.0
        out = conv2d(x, Tensor(weight), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("kernel", [1, 3])
    @pytest.mark.parametrize("padding", ["zeros", "edge"])
    def test_matches_loop_oracle(self, rng, kernel, padding):
        for _ in range(200):
            x = rng.normal(size=(2, 4, 4))
            weight = rng.normal(size=(3, 2, kernel, kernel))
            bias = rng.normal(size=3)
            out = conv2d(Tensor(x), Tensor(weight), Tensor(bias), padding=padding)
            np.testing.assert_allclose(out.data, conv2d_loop(x, weight, bias, padding), atol=1e-9)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.normal(size=(3, 4, 4))), Tensor(np.ones((1, 2, 1, 1))), Tensor(np.zeros(1)))

    def test_edge_padding_keeps_constants(self):
        x = Tensor(np.full((1, 5, 5), 0.3))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding="edge")
        np.testing.assert_allclose(out.data, 2.7)

    @pytest.mark.parametrize("padding", ["zeros", "edge"])
    def test_gradients(self, rng, padding):
        weight = Tensor(rng.normal(size=(2, 3, 3, 3)))
        bias = Tensor(rng.normal(size=2))
        check_op_gradient(lambda x: conv2d(x, weight, bias, padding=padding), (3, 4, 5), rng)

        x = Tensor(rng.normal(size=(3, 4, 5)))
        check_op_gradient(lambda w: conv2d(x, w, bias, padding=padding), (2, 3, 3, 3), rng)


class TestAdaptivePool:
    def test_exact_tiling(self):
        x = np.arange(16, dtype=float).reshape(1, 4, 4)
        out = adaptive_avg_pool(Tensor(x), 2, 2)
        np.testing.assert_allclose(out.data[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_global_mean(self, rng):
        x = rng.normal(size=(3, 5, 7))
        out = adaptive_avg_pool(Tensor(x), 1, 1)
        np.testing.assert_allclose(out.data[:, 0, 0], x.mean(axis=(1, 2)))

    def test_overlapping_bins(self, rng):
        x = rng.normal(size=(2, 5, 3))
        out = adaptive_avg_pool(Tensor(x), 2, 3)
        np.testing.assert_allclose(out.data[:, 0, 0], x[:, 0:3, 0].mean(axis=1))
        np.testing.assert_allclose(out.data[:, 1, 0], x[:, 2:5, 0].mean(axis=1))
        np.testing.assert_allclose(out.data, adaptive_pool_loop(x, 2, 3), atol=1e-12)

    def test_random_instances_match_oracle(self, rng):
        for _ in range(200):
            h, w = rng.integers(1, 9, size=2)
            out_h, out_w = rng.integers(1, h + 1), rng.integers(1, w + 1)
            x = rng.normal(size=(2, h, w))
            np.testing.assert_allclose(
                adaptive_avg_pool(Tensor(x), out_h, out_w).data, adaptive_pool_loop(x, out_h, out_w), atol=1e-9
            )

    def test_too_large(self, rng):
        with pytest.raises(DimensionError):
            adaptive_avg_pool(Tensor(rng.normal(size=(1, 4, 4))), 5, 2)

    def test_gradients(self, rng):
        check_op_gradient(lambda x: adaptive_avg_pool(x, 2, 3), (2, 5, 7), rng)


class TestBilinear:
    def test_identity_is_bitwise(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert np.array_equal(bilinear_resize(Tensor(x), 3, 4).data, x)

    def test_constant(self):
        out = bilinear_resize(Tensor(np.full((1, 3, 3), 0.7)), 8, 5)
        np.testing.assert_allclose(out.data, 0.7)

    def test_corner_aligned_grid(self):
        out = bilinear_resize(Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]])), 3, 3)
        np.testing.assert_allclose(out.data[0], [[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])

    def test_single_output_uses_centre(self):
        out = bilinear_resize(Tensor(np.array([[[0.0, 1.0, 2.0]]])), 1, 1)
        assert out.item() == pytest.approx(1.0)

    def test_random_instances_match_oracle(self, rng):
        for _ in range(200):
            h, w, out_h, out_w = rng.integers(1, 7, size=4)
            x = rng.normal(size=(2, h, w))
            np.testing.assert_allclose(
                bilinear_resize(Tensor(x), out_h, out_w).data, bilinear_loop(x, out_h, out_w), atol=1e-9
            )

    def test_gradients(self, rng):
        check_op_gradient(lambda x: bilinear_resize(x, 7, 5), (2, 3, 4), rng)
        check_op_gradient(lambda x: bilinear_resize(x, 2, 2), (2, 5, 4), rng)


class TestActivations:
    def test_sigmoid_values(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert sigmoid(Tensor(1.0)).item() == pytest.approx(0.7310585786, abs=1e-10)

    def test_sigmoid_saturation(self):
        with np.errstate(over="raise"):
            value = sigmoid(Tensor(-30.0)).item()
            assert 0.0 < value < 1e-6
            assert 0.0 < sigmoid(Tensor(-1000.0)).item() < 1e-6
            assert sigmoid(Tensor(1000.0)).item() == 1.0

    def test_gradients(self, rng):
        check_op_gradient(sigmoid, (2, 3, 3), rng)
        check_op_gradient(relu, (2, 3, 3), rng)


class TestCrossEntropy:
    def test_confident_correct(self):
        target = np.array([[0, 1], [1, 0]])
        logits = np.stack([np.where(target == 0, 20.0, -20.0), np.where(target == 1, 20.0, -20.0)])
        assert softmax_cross_entropy(Tensor(logits), target).item() < 1e-3

    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((2, 3, 3))), np.eye(3, dtype=int))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_loop_oracle(self, rng):
        for _ in range(200):
            logits = rng.normal(scale=3.0, size=(2, 2, 2))
            target = rng.integers(0, 2, size=(2, 2))
            loss = softmax_cross_entropy(Tensor(logits), target).item()
            assert loss == pytest.approx(cross_entropy_loop(logits, target), abs=1e-12)

    def test_bad_target(self):
        with pytest.raises(ValidationError):
            softmax_cross_entropy(Tensor(np.zeros((2, 2, 2))), np.array([[0, 2], [1, 0]]))

    def test_gradients(self, rng):
        target = rng.integers(0, 2, size=(3, 4))
        x = parameter(rng.normal(size=(2, 3, 4)))

        def loss_of(array):
            return softmax_cross_entropy(Tensor(array), target).item()

        with Graph():
            backward(softmax_cross_entropy(x, target))
        np.testing.assert_allclose(x.grad, numeric_grad(loss_of, x.numpy()), rtol=1e-6, atol=1e-9)


class TestElementwise:
    def test_mul_by_ones(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_array_equal(mul(a, Tensor(np.ones((2, 3, 3)))).data, a.data)

    def test_one_minus_involution(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_allclose(one_minus(one_minus(a)).data, a.data, atol=1e-15)

    def test_broadcast_mul(self, rng):
        weight = rng.normal(size=(1, 2, 2))
        x = rng.normal(size=(3, 2, 2))
        out = mul(Tensor(x), Tensor(weight)).data
        for c in range(3):
            for y in range(2):
                for xx in range(2):
                    assert out[c, y, xx] == x[c, y, xx] * weight[0, y, xx]

    def test_incompatible(self, rng):
        with pytest.raises(DimensionError):
            add(Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(3, 3, 3))))

    def test_gradients_with_broadcast(self, rng):
        other = Tensor(rng.normal(size=(3, 2, 2)))
        check_op_gradient(lambda w: mul(other, w), (1, 2, 2), rng)
        check_op_gradient(lambda x: sub(x, other), (3, 2, 2), rng)
        check_op_gradient(lambda x: scale(one_minus(x), 0.3), (3, 2, 2), rng)


class TestConcat:
    def test_single_part(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_array_equal(concat_channels([a]).data, a.data)

    def test_slice_round_trip(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(3, 3, 3)))
        both = concat_channels([a, b])
        np.testing.assert_array_equal(channel_slice(both, 0, 2).data, a.data)
        np.testing.assert_array_equal(channel_slice(both, 2, 5).data, b.data)

    def test_shape(self, rng):
        parts = [Tensor(rng.normal(size=(c, 4, 4))) for c in (2, 3, 1)]
        assert concat_channels(parts).shape == (6, 4, 4)

    def test_spatial_mismatch(self, rng):
        with pytest.raises(DimensionError):
            concat_channels([Tensor(rng.normal(size=(1, 4, 4))), Tensor(rng.normal(size=(1, 4, 3)))])

    def test_gradients(self, rng):
        other = Tensor(rng.normal(size=(2, 3, 3)))
        check_op_gradient(lambda x: concat_channels([other, x, other]), (1, 3, 3), rng)


class TestBackward:
    def test_non_scalar_loss(self, rng):
        x = parameter(rng.normal(size=(1, 2, 2)))
        with Graph(), pytest.raises(UsageError):
            backward(mul(x, x))

    def test_loss_without_graph(self):
        with pytest.raises(UsageError):
            backward(Tensor(1.0))

    def test_repeated_use_accumulates(self):
        x = parameter(np.array([[[3.0]]]))
        with Graph():
            backward(tensor_sum(mul(x, x)))
        np.testing.assert_allclose(x.grad, [[[6.0]]])

    def test_grad_accumulates_across_calls(self):
        x = parameter(np.array([[[2.0]]]))
        for _ in range(2):
            with Graph():
                backward(tensor_sum(scale(x, 5.0)))
        np.testing.assert_allclose(x.grad, [[[10.0]]])
        x.zero_grad()
        assert x.grad is None

    def test_constant_never_gets_grad(self, rng):
        x = parameter(rng.normal(size=(1, 2, 2)))
        constant = Tensor(rng.normal(size=(1, 2, 2)))
        with Graph():
            backward(tensor_sum(mul(x, constant)))
        assert constant.grad is None
        assert x.grad.shape == x.shape

    def test_graph_records_only_tracked_ops(self, rng):
        constant = Tensor(rng.normal(size=(1, 2, 2)))
        x = parameter(rng.normal(size=(1, 2, 2)))
        with Graph() as graph:
            relu(constant)
            assert len(graph) == 0
            relu(x)
            assert len(graph) == 1

    def test_clear_frees_nodes_and_keeps_leaves(self, rng):
        x = parameter(rng.normal(size=(1, 2, 2)))
        with Graph() as graph:
            out = relu(mul(x, x))
            assert out.creator is not None
        assert len(graph) == 0
        assert out.creator is None
        assert x.requires_grad and x.shape == (1, 2, 2)
        assert current_graph() is not graph

    def test_nothing_recorded_without_graph(self, rng):
        x = parameter(rng.normal(size=(1, 2, 2)))
        assert current_graph() is None
        out = tensor_sum(relu(mul(x, x)))
        assert not out.requires_grad and out.creator is None
        with pytest.raises(UsageError, match="outside a Graph"):
            backward(out)
        assert x.grad is None

    def test_replay_visits_each_node_once(self, rng):
        x = parameter(rng.normal(size=(2, 3, 3)))
        with Graph():
            shared = relu(x)
            backward(tensor_sum(add(shared, shared)))
        np.testing.assert_allclose(x.grad, 2.0 * (x.data > 0))


class TestTensor:
    def test_data_is_read_only(self, rng):
        x = Tensor(rng.normal(size=(2, 2)))
        with pytest.raises(ValueError):
            x.data[0, 0] = 1.0

    def test_assign_checks_shape(self):
        x = parameter(np.zeros((2, 2)))
        x.assign(np.ones((2, 2)))
        np.testing.assert_array_equal(x.data, 1.0)
        with pytest.raises(DimensionError):
            x.assign(np.ones(3))

    def test_item_needs_single_value(self):
        with pytest.raises(UsageError):
            Tensor(np.zeros(2)).item()
