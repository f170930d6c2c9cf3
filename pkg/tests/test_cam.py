import math

import numpy as np
import pytest

from CobNet.cam import (
    CrossAttentionModule,
    apply_attention,
    attention,
    classify,
    predict_mask,
    total_loss,
)
from CobNet.errors import DimensionError
from CobNet.layers import ConvLayer, ConvStack
from CobNet.tensor import Graph, Tensor, backward, parameter, softmax_cross_entropy
from tests.oracles import conv2d_loop, cross_entropy_loop


def zero_stack(spec):
    return ConvStack(
        [ConvLayer(Tensor(np.zeros((c_out, c_in, k, k))), Tensor(np.zeros(c_out))) for c_out, c_in, k in spec]
    )


def stack_oracle(stack, x):
    last = len(stack.layers) - 1
    for index, layer in enumerate(stack.layers):
        x = conv2d_loop(x, layer.weight.data, layer.bias.data)
        if index < last:
            x = np.maximum(x, 0.0)
    return x


class TestAttention:
    def test_zero_weights_half(self, rng):
        head = zero_stack([(3, 6, 1), (1, 3, 1)])
        a = attention(Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4))), head)
        np.testing.assert_array_equal(a.data, 0.5)

    def test_shape_and_range(self, rng):
        head = ConvStack.init(rng, [(3, 6, 1), (1, 3, 1)])
        a = attention(Tensor(rng.normal(size=(3, 5, 5))), Tensor(rng.normal(size=(3, 5, 5))), head)
        assert a.shape == (1, 5, 5)
        assert (a.data > 0).all() and (a.data < 1).all()

    def test_composed_oracle(self, rng):
        for _ in range(200):
            head = ConvStack.init(rng, [(3, 6, 1), (1, 3, 1)])
            f_o, f_b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
            expected = 1.0 / (1.0 + np.exp(-stack_oracle(head, np.concatenate([f_o, f_b]))))
            np.testing.assert_allclose(attention(Tensor(f_o), Tensor(f_b), head).data, expected, atol=1e-12)

    def test_shape_mismatch(self, rng):
        head = ConvStack.init(rng, [(3, 6, 1), (1, 3, 1)])
        with pytest.raises(DimensionError):
            attention(Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 5, 5))), head)

    def test_attention_weight_gradient(self, rng):
        module = CrossAttentionModule.init(rng, 3)
        f_o, f_b = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
        target = rng.integers(0, 2, size=(4, 4))
        weight = module.attention_head.layers[0].weight

        def loss_value():
            with Graph():
                return softmax_cross_entropy(module(f_o, f_b)[0], target).item()

        with Graph():
            backward(softmax_cross_entropy(module(f_o, f_b)[0], target))
        analytic = weight.grad.copy()

        numeric = np.zeros(weight.shape)
        original = weight.numpy()
        step = 1e-5
        for index in range(weight.size):
            values = original.copy().reshape(-1)
            values[index] += step
            weight.assign(values.reshape(weight.shape))
            upper = loss_value()
            values[index] -= 2 * step
            weight.assign(values.reshape(weight.shape))
            lower = loss_value()
            numeric.reshape(-1)[index] = (upper - lower) / (2 * step)
        weight.assign(original)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestApplyAttention:
    def test_all_ones(self, rng):
        f_o, f_b = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
        weighted_o, weighted_b = apply_attention(f_o, f_b, Tensor(np.ones((1, 4, 4))))
        np.testing.assert_array_equal(weighted_o.data, f_o.data)
        assert not weighted_b.data.any()

    def test_all_zeros(self, rng):
        f_o, f_b = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
        weighted_o, weighted_b = apply_attention(f_o, f_b, Tensor(np.zeros((1, 4, 4))))
        assert not weighted_o.data.any()
        np.testing.assert_array_equal(weighted_b.data, f_b.data)

    def test_weights_sum_to_one(self, rng):
        for _ in range(200):
            f_o, f_b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
            a = rng.uniform(size=(1, 4, 4))
            weighted_o, weighted_b = apply_attention(Tensor(f_o), Tensor(f_b), Tensor(a))
            np.testing.assert_allclose(weighted_o.data, a * f_o, atol=1e-15)
            np.testing.assert_allclose(weighted_b.data, (1 - a) * f_b, atol=1e-15)
            np.testing.assert_allclose(weighted_o.data + weighted_b.data, a * f_o + (1 - a) * f_b, atol=1e-12)


class TestClassify:
    def test_zero_weights_tie_to_background(self, rng):
        classifier = zero_stack([(3, 6, 3), (3, 3, 3), (3, 3, 3), (2, 3, 1)])
        logits = classify(Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4))), classifier)
        assert logits.shape == (2, 4, 4)
        assert not predict_mask(logits).any()

    def test_composed_oracle(self, rng):
        for _ in range(200):
            classifier = ConvStack.init(rng, [(3, 6, 3), (3, 3, 3), (3, 3, 3), (2, 3, 1)])
            f_o, f_b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
            np.testing.assert_allclose(
                classify(Tensor(f_o), Tensor(f_b), classifier).data,
                stack_oracle(classifier, np.concatenate([f_o, f_b])),
                atol=1e-9,
            )


class TestTotalLoss:
    def test_single_level_doubles(self, rng):
        logits = Tensor(rng.normal(size=(2, 4, 4)))
        mask = rng.integers(0, 2, size=(4, 4))
        breakdown = total_loss(logits, [logits], mask)
        assert breakdown.total.item() == pytest.approx(2 * breakdown.segmentation, abs=1e-12)

    def test_uniform_logits(self, rng):
        zeros = Tensor(np.zeros((2, 2, 2)))
        breakdown = total_loss(zeros, [Tensor(np.zeros((2, 1, 1))), zeros], rng.integers(0, 2, size=(8, 8)))
        assert breakdown.total.item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_mean_of_intermediates_plus_segmentation(self, rng):
        for _ in range(200):
            mask = rng.integers(0, 2, size=(3, 3))
            final, first, second = (rng.normal(size=(2, 3, 3)) for _ in range(3))
            breakdown = total_loss(Tensor(final), [Tensor(first), Tensor(second)], mask)
            expected = (cross_entropy_loop(first, mask) + cross_entropy_loop(second, mask)) / 2 + cross_entropy_loop(
                final, mask
            )
            assert breakdown.total.item() == pytest.approx(expected, abs=1e-12)
            assert breakdown.intermediate == pytest.approx(
                [cross_entropy_loop(first, mask), cross_entropy_loop(second, mask)], abs=1e-12
            )

    def test_permutation_invariant(self, rng):
        mask = rng.integers(0, 2, size=(4, 4))
        levels = [Tensor(rng.normal(size=(2, size, size))) for size in (4, 2, 1)]
        final = Tensor(rng.normal(size=(2, 4, 4)))
        assert total_loss(final, levels, mask).total.item() == pytest.approx(
            total_loss(final, levels[::-1], mask).total.item(), abs=1e-12
        )

    def test_needs_intermediates(self, rng):
        with pytest.raises(DimensionError):
            total_loss(Tensor(np.zeros((2, 2, 2))), [], np.zeros((2, 2), dtype=int))

    def test_gradient_reaches_all_logits(self, rng):
        final, level = parameter(rng.normal(size=(2, 2, 2))), parameter(rng.normal(size=(2, 1, 1)))
        with Graph():
            backward(total_loss(final, [level], rng.integers(0, 2, size=(4, 4))).total)
        assert np.abs(final.grad).sum() > 0 and np.abs(level.grad).sum() > 0


class TestPredictMask:
    def test_object_larger(self):
        logits = np.stack([np.zeros((3, 3)), np.ones((3, 3))])
        np.testing.assert_array_equal(predict_mask(Tensor(logits)), 1)

    def test_ties_to_background(self):
        np.testing.assert_array_equal(predict_mask(Tensor(np.full((2, 3, 3), 0.4))), 0)

    def test_comparison_oracle(self, rng):
        logits = rng.normal(size=(2, 5, 5))
        prediction = predict_mask(Tensor(logits))
        for y in range(5):
            for x in range(5):
                assert prediction[y, x] == (1 if logits[1, y, x] > logits[0, y, x] else 0)

    def test_shift_invariant(self, rng):
        logits = rng.normal(size=(2, 5, 5))
        shift = rng.normal(size=(1, 5, 5)) * 0.25
        np.testing.assert_array_equal(predict_mask(Tensor(logits)), predict_mask(Tensor(logits + shift)))
