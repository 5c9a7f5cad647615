"""Tensor engine: layer values, finite-difference gradient checks and Adam"""

import warnings

import numpy as np
import pytest

from lab_errors import DimensionError, NumericError, ParameterError, UsageError
from tensor_autodiff import (
    AdamState, Mode, Tape, Tensor, adam_step, add, backward_pass, conv2d_valid, dropout2d, identity,
    flatten, linear_affine, log_softmax, nll_loss, parameter, relu, scale, squared_distance, sum_all, take_rows,
)


def nested_loop_correlation(x, kernels, bias):
    n, c_in, height, width = x.shape
    c_out, _, k, _ = kernels.shape
    out = np.zeros((n, c_out, height - k + 1, width - k + 1))
    for b in range(n):
        for o in range(c_out):
            for i in range(height - k + 1):
                for j in range(width - k + 1):
                    out[b, o, i, j] = bias[o] + np.sum(x[b, :, i:i + k, j:j + k] * kernels[o])
    return out


def numeric_gradient(fn, array, h=1e-5):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + h
        plus = fn()
        array[index] = saved - h
        minus = fn()
        array[index] = saved
        grad[index] = (plus - minus) / (2 * h)
    return grad


class TestConvolution:
    def test_all_ones(self):
        out = conv2d_valid(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 4.0)

    def test_cifar_spatial_size(self, rng):
        out = conv2d_valid(Tensor(rng.normal(size=(1, 3, 32, 32))), Tensor(rng.normal(size=(4, 3, 5, 5))),
                           Tensor(np.zeros(4)))
        assert out.shape == (1, 4, 28, 28)

    def test_matches_nested_loops(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        kernels = rng.normal(size=(3, 2, 5, 5))
        bias = rng.normal(size=3)
        out = conv2d_valid(Tensor(x), Tensor(kernels), Tensor(bias))
        np.testing.assert_allclose(out.data, nested_loop_correlation(x, kernels, bias), atol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        x = parameter(rng.normal(size=(2, 2, 5, 5)))
        kernels = parameter(rng.normal(size=(3, 2, 3, 3)))
        bias = parameter(rng.normal(size=3))

        with Tape():
            out = conv2d_valid(x, kernels, bias)
            loss = sum_all(relu(out))
            backward_pass(loss)

        def relu_sum():
            return float(np.maximum(conv2d_valid(x, kernels, bias).data, 0).sum())

        for tensor in (x, kernels, bias):
            np.testing.assert_allclose(tensor.grad, numeric_gradient(relu_sum, tensor.data), atol=1e-6)

    @pytest.mark.parametrize("x_shape, k_shape, bias_len, axis", [
        ((1, 2, 6, 6), (3, 1, 3, 3), 3, "channel axis 1"),
        ((1, 1, 2, 6), (1, 1, 3, 3), 1, "height axis 2"),
        ((1, 1, 6, 2), (1, 1, 3, 3), 1, "width axis 3"),
        ((1, 1, 6, 6), (2, 1, 3, 3), 3, "bias axis 0"),
    ])
    def test_dimension_errors_name_the_axis(self, x_shape, k_shape, bias_len, axis):
        with pytest.raises(DimensionError, match=axis):
            conv2d_valid(Tensor(np.zeros(x_shape)), Tensor(np.zeros(k_shape)), Tensor(np.zeros(bias_len)))


class TestLinear:
    def test_identity_weight(self):
        x = np.array([0.5, -2.0, 3.0])
        out = linear_affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_product(self):
        out = linear_affine(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [3.0, 7.0])

    def test_weight_gradient_of_sum(self, rng):
        x = Tensor(rng.normal(size=4))
        weight = parameter(rng.normal(size=(3, 4)))
        bias = parameter(rng.normal(size=3))
        with Tape():
            backward_pass(sum_all(linear_affine(x, weight, bias)))
        expected = numeric_gradient(lambda: float(linear_affine(x, weight, bias).data.sum()), weight.data)
        np.testing.assert_allclose(weight.grad, expected, atol=1e-6)

    def test_sum_relu_of_product(self, rng):
        x = parameter(rng.normal(size=5))
        weight = parameter(rng.normal(size=(4, 5)))
        bias = parameter(np.zeros(4))
        with Tape():
            backward_pass(sum_all(relu(linear_affine(x, weight, bias))))

        def value():
            return float(np.maximum(weight.data @ x.data + bias.data, 0).sum())

        np.testing.assert_allclose(weight.grad, numeric_gradient(value, weight.data), atol=1e-6)
        np.testing.assert_allclose(x.grad, numeric_gradient(value, x.data), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear_affine(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_relu_negative_input_gets_zero_gradient(self):
        x = parameter([-1.0, -0.5, -3.0])
        with Tape():
            out = relu(x)
            backward_pass(sum_all(out))
        assert np.all(out.data == 0.0)
        assert np.all(x.grad == 0.0)

    def test_relu_gradient_mask(self, rng):
        x = parameter(rng.normal(size=20))
        with Tape():
            backward_pass(sum_all(relu(x)))
        np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))

    def test_log_softmax_normalizes(self, rng):
        out = log_softmax(Tensor(rng.normal(size=(5, 2))))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_logits_give_ln2(self):
        loss = nll_loss(log_softmax(Tensor(np.zeros((4, 2)))), [0, 1, 1, 0])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


class TestDropout:
    def test_zero_probability_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert dropout2d(x, 0.0, Mode.TRAIN, rng) is x

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_array_equal(dropout2d(x, 0.7, "eval").data, x.data)

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones((2, 8, 3, 3)))
        a = dropout2d(x, 0.5, Mode.TRAIN, np.random.default_rng(5))
        b = dropout2d(x, 0.5, Mode.TRAIN, np.random.default_rng(5))
        np.testing.assert_array_equal(a.data, b.data)

    def test_drop_fraction(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((1, 1, 1, 1)))
        dropped = sum(dropout2d(x, 0.5, Mode.TRAIN, rng).data.item() == 0.0 for _ in range(10_000))
        assert abs(dropped / 10_000 - 0.5) < 0.05

    def test_whole_channels_drop_with_inverted_scaling(self):
        out = dropout2d(Tensor(np.ones((4, 16, 3, 3))), 0.25, Mode.TRAIN, np.random.default_rng(2))
        per_channel = out.data.reshape(4, 16, -1)
        assert np.all(per_channel.min(axis=2) == per_channel.max(axis=2))
        assert set(np.unique(out.data)) <= {0.0, 1.0 / 0.75}

    def test_train_mode_needs_rng(self):
        with pytest.raises(UsageError):
            dropout2d(Tensor(np.ones((1, 2, 2, 2))), 0.5, Mode.TRAIN)

    def test_probability_out_of_range(self):
        with pytest.raises(ParameterError):
            dropout2d(Tensor(np.ones((1, 2, 2, 2))), 1.5, Mode.EVAL)


class TestBackward:
    def test_identity_loss(self):
        x = parameter(3.0)
        with Tape():
            backward_pass(identity(x))
        assert x.grad == pytest.approx(1.0)

    def test_needs_taped_scalar(self):
        with pytest.raises(UsageError):
            backward_pass(Tensor(1.0))
        x = parameter([1.0, 2.0])
        with Tape():
            out = relu(x)
            with pytest.raises(UsageError):
                backward_pass(out)

    def test_shared_subexpression_accumulates(self):
        x = parameter([2.0])
        with Tape():
            y = relu(x)
            backward_pass(sum_all(take_rows(y, [0, 0])))
        assert x.grad[0] == pytest.approx(2.0)

    def test_wrt_leaves_parameters_alone(self, rng):
        x = parameter(rng.normal(size=4))
        weight = parameter(rng.normal(size=(3, 4)))
        with Tape():
            hidden = linear_affine(x, weight, parameter(np.zeros(3)))
            backward_pass(sum_all(relu(hidden)), wrt=[hidden])
        assert hidden.grad is not None
        assert weight.grad is None and x.grad is None

    def test_tape_is_cleared(self):
        x = parameter([1.0])
        with Tape() as tape:
            backward_pass(sum_all(relu(x)))
            assert len(tape) == 0

    def test_non_finite_output_is_numeric_error(self):
        with pytest.raises(NumericError):
            linear_affine(Tensor([np.inf]), Tensor([[1.0]]), Tensor([0.0]))

    def test_no_recording_without_tape(self):
        x = parameter([1.0])
        assert relu(x).node_id is None

    def small_network_gradients(self, seed):
        rng = np.random.default_rng(seed)
        params = {"k": parameter(rng.normal(size=(3, 1, 3, 3))), "b": parameter(np.zeros(3)),
                  "w": parameter(rng.normal(size=(2, 48))), "c": parameter(np.zeros(2))}
        x = Tensor(rng.normal(size=(4, 1, 6, 6)))
        with Tape():
            hidden = dropout2d(relu(conv2d_valid(x, params["k"], params["b"])), 0.25, Mode.TRAIN, rng)
            logits = linear_affine(flatten(hidden), params["w"], params["c"])
            backward_pass(nll_loss(log_softmax(logits), [0, 1, 1, 0]))
        return {name: p.grad for name, p in params.items()}

    def test_independent_tapes_give_identical_gradients(self):
        first, second = self.small_network_gradients(21), self.small_network_gradients(21)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_loss_backward_emits_no_warnings(self, rng):
        x = parameter(rng.normal(size=(3, 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            with Tape():
                nll = scale(nll_loss(log_softmax(x), [0, 1, 1]), 2.0)
                backward_pass(add(nll, squared_distance(x, np.zeros((3, 2)))))
        assert x.grad.shape == (3, 2)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = parameter([1.0, -2.0])
        p.grad = np.zeros(2)
        adam_step([p], AdamState(lr=0.01))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_zero_learning_rate_is_bit_identical(self, rng):
        start = rng.normal(size=(3, 4))
        p = parameter(start.copy())
        state = AdamState(lr=0.0)
        for _ in range(5):
            p.grad = rng.normal(size=(3, 4))
            adam_step({"p": p}, state)
        assert np.array_equal(p.data, start)

    @pytest.mark.parametrize("g", [1.0, 100.0])
    def test_first_step_moves_by_lr(self, g):
        p = parameter([0.5])
        p.grad = np.array([g])
        adam_step({"p": p}, AdamState(lr=0.001))
        assert p.data[0] == pytest.approx(0.5 - 0.001, abs=1e-6)

    def test_gradients_are_consumed(self):
        p = parameter([0.5])
        p.grad = np.array([1.0])
        state = adam_step({"p": p}, AdamState())
        assert p.grad is None
        assert state.step_count == 1
        with pytest.raises(UsageError):
            adam_step({"p": p}, state)

    def test_state_shape_mismatch(self):
        p = parameter([0.5])
        state = AdamState()
        state.m["p"] = np.zeros(3)
        p.grad = np.array([1.0])
        with pytest.raises(DimensionError):
            adam_step({"p": p}, state)

    def test_minimizes_a_quadratic(self):
        p = parameter([3.0])
        state = AdamState(lr=0.1)
        for _ in range(500):
            p.grad = 2 * p.data
            adam_step([p], state)
        assert abs(p.data[0]) < 0.05
