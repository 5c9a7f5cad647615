"""Network assembly: shapes, normalization, parameter census and the full finite-difference check"""

import math
from dataclasses import replace

import numpy as np
import pytest

from lab_errors import DimensionError
from models import CQural, ClassicalCNN, CquralConfig, build_neural_model
from quantum_sim import HeadMode
from tensor_autodiff import Mode, Tape, backward_pass, nll_loss


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)


class TestShapes:
    def test_cifar_feature_maps(self):
        config = CquralConfig(input_shape=(3, 32, 32))
        assert config.conv1_shape[1:] == (28, 28)
        assert config.conv2_shape[1:] == (24, 24)
        model = CQural(CquralConfig(input_shape=(3, 32, 32), conv1=2, conv2=2, fc4=4))
        forward = model.forward(np.zeros((1, 3, 32, 32)))
        assert forward.conv2.shape == (1, 2, 24, 24)

    def test_mnist_feature_maps(self):
        config = CquralConfig(input_shape=(1, 28, 28))
        assert config.conv2_shape == (16, 20, 20)
        assert config.flat_width == 16 * 20 * 20

    def test_input_too_small(self):
        with pytest.raises(DimensionError):
            CquralConfig(input_shape=(1, 7, 7), kernel_size=5)

    def test_batch_shape_checked(self, tiny_config):
        with pytest.raises(DimensionError):
            CQural(tiny_config).forward(np.zeros((1, 1, 9, 9)))


class TestForward:
    @pytest.mark.parametrize("head_mode", [HeadMode.AMPLITUDE, HeadMode.ANGLE])
    def test_cqural_probabilities_normalized(self, tiny_config, tiny_task, head_mode):
        config = replace(tiny_config, head_mode=head_mode)
        probs = CQural(config).probabilities(tiny_task.train)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_cnn_softmax_normalized(self, tiny_config, tiny_task):
        probs = ClassicalCNN(tiny_config).probabilities(tiny_task.test)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_logits_cross_entropy(self, tiny_config, tiny_task):
        model = ClassicalCNN(tiny_config)
        model.params["fc5.w"].data[:] = 0.0
        model.params["fc5.b"].data[:] = 0.0
        forward = model.forward(tiny_task.train[:4])
        loss = model.loss(forward.log_probs, [0, 1, 0, 1])
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_eval_forward_is_deterministic(self, tiny_config, tiny_task):
        model = CQural(tiny_config)
        a = model.forward(tiny_task.train[:3], Mode.EVAL).log_probs.data
        b = model.forward(tiny_task.train[:3], "eval").log_probs.data
        np.testing.assert_array_equal(a, b)

    def test_predictions(self, tiny_config, tiny_task):
        predictions = CQural(tiny_config).predict(tiny_task.test)
        assert predictions.labels.shape == (len(tiny_task.test),)
        assert set(predictions.labels) <= {0, 1}
        assert np.all((predictions.scores >= 0) & (predictions.scores <= 1))


class TestParameters:
    def test_trunks_have_equal_size(self, tiny_config):
        assert CQural(tiny_config).trunk_parameter_count() == ClassicalCNN(tiny_config).trunk_parameter_count()

    def test_heads_differ(self, tiny_config):
        hybrid = CQural(tiny_config)
        classical = ClassicalCNN(tiny_config)
        assert hybrid.params["fc5.w"].shape == (2, tiny_config.fc4)
        assert classical.params["fc5.w"].shape == (2, tiny_config.fc4)
        assert "head.w" in hybrid.parameters()
        assert "head.w" not in classical.parameters()

    def test_angle_head_has_one_output(self, tiny_config):
        model = CQural(replace(tiny_config, head_mode=HeadMode.ANGLE))
        assert model.params["fc5.w"].shape == (1, tiny_config.fc4)
        assert "head.w" not in model.parameters()

    def test_same_seed_same_trunk(self, tiny_config):
        a, b = CQural(tiny_config), ClassicalCNN(tiny_config)
        for name in ("conv1.w", "conv2.w", "fc4.w"):
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_registry(self, tiny_config):
        assert isinstance(build_neural_model("cnn", tiny_config), ClassicalCNN)
        assert isinstance(build_neural_model("cqural", tiny_config), CQural)


class TestGradientCheck:
    @pytest.mark.parametrize("model_class", [CQural, ClassicalCNN])
    def test_full_network_matches_finite_differences(self, tiny_config, tiny_task, model_class):
        model = model_class(tiny_config)
        images = tiny_task.train[:3]
        labels = [image.label for image in images]

        def loss_value():
            return nll_loss(model.forward(images, Mode.EVAL).log_probs, labels).item()

        with Tape():
            backward_pass(model.loss(model.forward(images, Mode.EVAL).log_probs, labels))

        h = 1e-5
        for name, tensor in model.parameters().items():
            analytic = tensor.grad.copy()
            numeric = np.zeros_like(tensor.data)
            for index in np.ndindex(tensor.shape):
                saved = tensor.data[index]
                tensor.data[index] = saved + h
                plus = loss_value()
                tensor.data[index] = saved - h
                minus = loss_value()
                tensor.data[index] = saved
                numeric[index] = (plus - minus) / (2 * h)
            assert relative_error(analytic, numeric).max() < 1e-4, name
