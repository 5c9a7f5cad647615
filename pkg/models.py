#!/usr/bin/env python3
"""
Network assembly for the CQural lab
conv1 -> conv2 -> drop3 -> fc4 -> fc5 trunk shared by the hybrid CQural network and the classical CNN,
plus the common binary-classifier interface every comparison model implements
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from data_ingest import LabeledImage
from lab_errors import DimensionError, ParameterError
from quantum_sim import HEAD_ARITY, HeadMode, QuantumHead, hybrid_head
from tensor_autodiff import (
    Mode, Tensor, as_mode, conv2d_valid, dropout2d, flatten, linear_affine, log_softmax,
    nll_loss, parameter, relu, scale, tanh, uniform_init,
)

logger = logging.getLogger(__name__)

TRUNK_PARAMETERS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc4.w", "fc4.b")
EVAL_CHUNK = 32


@dataclass(frozen=True)
class CquralConfig:
    input_shape: Tuple[int, int, int]
    conv1: int = 8
    conv2: int = 16
    kernel_size: int = 5
    fc4: int = 32
    dropout: float = 0.25
    head_mode: HeadMode = HeadMode.AMPLITUDE
    shots: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "head_mode", HeadMode(self.head_mode))
        if len(self.input_shape) != 3:
            raise DimensionError(f"input shape must be C×H×W, got {self.input_shape}")
        _, height, width = self.input_shape
        shrink = 2 * (self.kernel_size - 1)
        if height - shrink < 1 or width - shrink < 1:
            raise DimensionError(f"input {height}×{width} too small for two {self.kernel_size}×{self.kernel_size} convolutions")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def conv1_shape(self) -> Tuple[int, int, int]:
        _, height, width = self.input_shape
        k = self.kernel_size
        return self.conv1, height - k + 1, width - k + 1

    @property
    def conv2_shape(self) -> Tuple[int, int, int]:
        _, height, width = self.conv1_shape
        k = self.kernel_size
        return self.conv2, height - k + 1, width - k + 1

    @property
    def flat_width(self) -> int:
        return int(np.prod(self.conv2_shape))

    @property
    def head_arity(self) -> int:
        return HEAD_ARITY[self.head_mode]


class ForwardPass(NamedTuple):
    log_probs: Tensor
    conv2: Tensor


class Predictions(NamedTuple):
    labels: np.ndarray
    scores: np.ndarray


def init_trunk(config: CquralConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Trunk weights drawn first from the init stream, so every head sees the same trunk"""
    c_in = config.input_shape[0]
    k = config.kernel_size
    fan1, fan2 = c_in * k * k, config.conv1 * k * k
    return {
        "conv1.w": uniform_init((config.conv1, c_in, k, k), fan1, rng, "conv1.w"),
        "conv1.b": uniform_init((config.conv1,), fan1, rng, "conv1.b"),
        "conv2.w": uniform_init((config.conv2, config.conv1, k, k), fan2, rng, "conv2.w"),
        "conv2.b": uniform_init((config.conv2,), fan2, rng, "conv2.b"),
        "fc4.w": uniform_init((config.fc4, config.flat_width), config.flat_width, rng, "fc4.w"),
        "fc4.b": uniform_init((config.fc4,), config.flat_width, rng, "fc4.b"),
    }


def init_fc5(config: CquralConfig, width: int, rng: np.random.Generator) -> Dict[str, Tensor]:
    return {
        "fc5.w": uniform_init((width, config.fc4), config.fc4, rng, "fc5.w"),
        "fc5.b": uniform_init((width,), config.fc4, rng, "fc5.b"),
    }


def as_batch(images: Union[LabeledImage, Sequence[LabeledImage], np.ndarray], config: CquralConfig) -> Tensor:
    if isinstance(images, LabeledImage):
        data = images.pixels[None]
    elif isinstance(images, np.ndarray):
        data = images if images.ndim == 4 else images[None]
    else:
        data = np.stack([image.pixels for image in images])
    if tuple(data.shape[1:]) != config.input_shape:
        raise DimensionError(f"image shape {tuple(data.shape[1:])} does not match model input {config.input_shape}")
    return Tensor(data)


def trunk_forward(config: CquralConfig, params: Dict[str, Tensor], x: Tensor, mode: Mode,
                  rng: Optional[np.random.Generator]) -> Tuple[Tensor, Tensor]:
    """(conv2 activations, fc4 hidden) for an N×C×H×W batch"""
    a1 = relu(conv2d_valid(x, params["conv1.w"], params["conv1.b"]))
    a2 = relu(conv2d_valid(a1, params["conv2.w"], params["conv2.b"]))
    d3 = dropout2d(a2, config.dropout, mode, rng)
    h4 = relu(linear_affine(flatten(d3), params["fc4.w"], params["fc4.b"]))
    return a2, h4


def cqural_forward(config: CquralConfig, params: Dict[str, Tensor], head: QuantumHead, images,
                   mode: Union[Mode, str] = Mode.EVAL, rng: Optional[np.random.Generator] = None) -> ForwardPass:
    """Hybrid network: fc5 values are squashed to (-π, π) by tanh·π and fed to the quantum head"""
    mode = as_mode(mode)
    a2, h4 = trunk_forward(config, params, as_batch(images, config), mode, rng)
    angles = scale(tanh(linear_affine(h4, params["fc5.w"], params["fc5.b"])), math.pi)
    return ForwardPass(hybrid_head(angles, head), a2)


def classical_cnn_forward(config: CquralConfig, params: Dict[str, Tensor], images,
                          mode: Union[Mode, str] = Mode.EVAL,
                          rng: Optional[np.random.Generator] = None) -> ForwardPass:
    """Same trunk, fc5 emits two logits turned into log-probabilities by log-softmax"""
    mode = as_mode(mode)
    a2, h4 = trunk_forward(config, params, as_batch(images, config), mode, rng)
    logits = linear_affine(h4, params["fc5.w"], params["fc5.b"])
    return ForwardPass(log_softmax(logits), a2)


def cross_entropy(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    return nll_loss(log_probs, labels)


# ---------------------------------------------------------------- classifier interface

class BinaryClassifier(ABC):
    """Common surface for all five comparison models: predicted label plus a class-1 score"""

    name: str = "classifier"

    @abstractmethod
    def predict(self, images: Sequence[LabeledImage]) -> Predictions:
        ...


class NeuralClassifier(BinaryClassifier):
    """Shared trunk plus a model-specific fc5/head; trained by the continual trainer"""

    loss_name = "nll"

    def __init__(self, config: CquralConfig):
        self.config = config
        init_seq, shot_seq = np.random.SeedSequence(config.seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.params: Dict[str, Tensor] = init_trunk(config, init_rng)
        self.params.update(init_fc5(config, self.fc5_width, init_rng))
        self._shot_seed = int(shot_seq.generate_state(1)[0])

    @property
    @abstractmethod
    def fc5_width(self) -> int:
        ...

    @abstractmethod
    def forward(self, images, mode: Union[Mode, str] = Mode.EVAL,
                rng: Optional[np.random.Generator] = None) -> ForwardPass:
        ...

    def loss(self, log_probs: Tensor, labels: Sequence[int]) -> Tensor:
        return nll_loss(log_probs, labels)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def trunk_parameter_count(self) -> int:
        return sum(self.params[name].size for name in TRUNK_PARAMETERS)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def probabilities(self, images: Sequence[LabeledImage]) -> np.ndarray:
        """Eval-mode class probabilities, N×2, computed without a tape"""
        if len(images) == 0:
            return np.zeros((0, 2))
        chunks = []
        for start in range(0, len(images), EVAL_CHUNK):
            chunk = images[start:start + EVAL_CHUNK]
            chunks.append(np.exp(self.forward(chunk, Mode.EVAL).log_probs.data.reshape(-1, 2)))
        return np.concatenate(chunks)

    def predict(self, images: Sequence[LabeledImage]) -> Predictions:
        probs = self.probabilities(images)
        return Predictions(labels=probs.argmax(axis=1).astype(np.int64), scores=probs[:, 1])


class CQural(NeuralClassifier):
    """conv1, conv2, drop3, fc4, fc5 and the single-qubit hybrid head"""

    name = "cqural"
    loss_name = "nll"

    def __init__(self, config: CquralConfig):
        super().__init__(config)
        self.head = QuantumHead(mode=config.head_mode, weight=parameter([0.0], name="head.w"),
                                shots=config.shots, seed=self._shot_seed)

    @property
    def fc5_width(self) -> int:
        return self.config.head_arity

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.params)
        params.update(self.head.parameters())
        return params

    def forward(self, images, mode: Union[Mode, str] = Mode.EVAL,
                rng: Optional[np.random.Generator] = None) -> ForwardPass:
        return cqural_forward(self.config, self.params, self.head, images, mode, rng)


class ClassicalCNN(NeuralClassifier):
    name = "cnn"
    loss_name = "cross_entropy"

    @property
    def fc5_width(self) -> int:
        return 2

    def forward(self, images, mode: Union[Mode, str] = Mode.EVAL,
                rng: Optional[np.random.Generator] = None) -> ForwardPass:
        return classical_cnn_forward(self.config, self.params, images, mode, rng)

    def loss(self, log_probs: Tensor, labels: Sequence[int]) -> Tensor:
        return cross_entropy(log_probs, labels)


NEURAL_MODELS = {"cqural": CQural, "cnn": ClassicalCNN}


def build_neural_model(name: str, config: CquralConfig) -> NeuralClassifier:
    model = NEURAL_MODELS[name](config)
    logger.info(f"🧠 Built {name} with {model.parameter_count()} parameters "
                f"(trunk {model.trunk_parameter_count()}), feature maps {config.conv1_shape[1:]} -> {config.conv2_shape[1:]}")
    return model
