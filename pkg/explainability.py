#!/usr/bin/env python3
"""
GradCAM saliency over conv2 feature maps and explanation-driven replay
Stored maps of confident correct predictions are replayed into the training loss
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from data_ingest import LabeledImage
from lab_errors import DimensionError, ParameterError, UsageError
from models import EVAL_CHUNK, NeuralClassifier
from tensor_autodiff import (
    Mode, Tape, Tensor, add, backward_pass, channel_weighted_sum, nll_loss, relu, scale,
    squared_distance, take_rows,
)

logger = logging.getLogger(__name__)

DEFAULT_CONFIDENCE = 0.90


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    upsampled: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def gradcam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(Σ_k α_k A_k) / max with α_k the spatial mean of the gradient; a zero map stays zero"""
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.ndim != 3 or activations.shape != gradients.shape:
        raise DimensionError(f"gradcam needs matching C×H×W activations and gradients, "
                             f"got {activations.shape} and {gradients.shape}")
    alpha = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def bilinear_upsample(values: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Separable corner-aligned bilinear interpolation"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise DimensionError(f"bilinear_upsample needs a non-empty 2-D map, got shape {values.shape}")
    height, width = int(target[0]), int(target[1])
    if height < values.shape[0] or width < values.shape[1]:
        raise DimensionError(f"target {height}×{width} is smaller than source {values.shape[0]}×{values.shape[1]}")

    def weights(src: int, dst: int):
        if src == 1:
            zeros = np.zeros(dst, dtype=np.int64)
            return zeros, zeros, np.zeros(dst)
        position = np.arange(dst) * (src - 1) / max(dst - 1, 1)
        low = np.minimum(np.floor(position).astype(np.int64), src - 2)
        return low, low + 1, position - low

    r0, r1, fr = weights(values.shape[0], height)
    c0, c1, fc = weights(values.shape[1], width)
    rows = values[r0] * (1.0 - fr)[:, None] + values[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]


def _class_objective(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Σ_i log p_i(target_i) as a taped scalar"""
    return scale(nll_loss(log_probs, targets), -float(len(targets)))


def gradcam_batch(model: NeuralClassifier, images: Sequence[LabeledImage],
                  targets: Sequence[int], upsample: bool = True) -> List[SaliencyMap]:
    """
    Eval-mode GradCAM for several images at once. Rows of the batch do not interact,
    so the gradient of the summed objective splits into per-image gradients.
    Model parameters are left untouched.
    """
    targets = [int(t) for t in targets]
    for target in targets:
        if target not in (0, 1):
            raise UsageError(f"gradcam target class must be 0 or 1, got {target}")
    if len(targets) != len(images):
        raise UsageError(f"{len(targets)} targets for {len(images)} images")

    maps: List[SaliencyMap] = []
    for start in range(0, len(images), EVAL_CHUNK):
        chunk = list(images[start:start + EVAL_CHUNK])
        chunk_targets = targets[start:start + EVAL_CHUNK]
        with Tape():
            forward = model.forward(chunk, Mode.EVAL)
            log_probs = forward.log_probs
            backward_pass(_class_objective(log_probs, chunk_targets), wrt=[forward.conv2])
        gradients = forward.conv2.grad
        forward.conv2.grad = None
        for row, image in enumerate(chunk):
            values = gradcam_from(forward.conv2.data[row], gradients[row])
            upsampled = bilinear_upsample(values, image.pixels.shape[1:]) if upsample else None
            maps.append(SaliencyMap(values, upsampled))
    return maps


def gradcam(model: NeuralClassifier, image: LabeledImage, target: int) -> SaliencyMap:
    return gradcam_batch(model, [image], [target])[0]


def channel_weights(model: NeuralClassifier, images: Sequence[LabeledImage],
                    targets: Sequence[int]) -> np.ndarray:
    """α_k per image (N×C), from a separate eval-mode tape"""
    with Tape():
        forward = model.forward(list(images), Mode.EVAL)
        backward_pass(_class_objective(forward.log_probs, targets), wrt=[forward.conv2])
    alphas = forward.conv2.grad.mean(axis=(2, 3))
    forward.conv2.grad = None
    return alphas


# ---------------------------------------------------------------- replay buffer

@dataclass(frozen=True)
class ReplayEntry:
    image: LabeledImage
    label: int
    saliency: SaliencyMap
    confidence: float


@dataclass
class ReplayBuffer:
    """Per-class reservoir of explanations from confident correct predictions"""

    capacity_per_class: int = 32
    confidence_threshold: float = DEFAULT_CONFIDENCE
    entries: Dict[int, List[ReplayEntry]] = field(default_factory=lambda: {0: [], 1: []})
    seen: Dict[int, int] = field(default_factory=lambda: {0: 0, 1: 0})

    def __post_init__(self):
        if self.capacity_per_class < 1:
            raise ParameterError(f"replay capacity must be at least 1, got {self.capacity_per_class}")

    def __len__(self) -> int:
        return sum(len(bucket) for bucket in self.entries.values())

    def all_entries(self) -> List[ReplayEntry]:
        return [entry for label in sorted(self.entries) for entry in self.entries[label]]

    def holds(self, source_index: int) -> bool:
        return any(entry.image.source_index == source_index for entry in self.all_entries())

    def sample(self, count: int, rng: np.random.Generator) -> List[ReplayEntry]:
        pool = self.all_entries()
        count = min(count, len(pool))
        if count == 0:
            return []
        return [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]


def buffer_admit(buffer: ReplayBuffer, image: LabeledImage, predicted: int, confidence: float,
                 saliency: SaliencyMap, rng: np.random.Generator) -> ReplayBuffer:
    """Admit iff the prediction is correct and confidence exceeds the threshold; full classes use reservoir replacement"""
    if predicted != image.label or confidence <= buffer.confidence_threshold:
        return buffer
    if buffer.holds(image.source_index):
        return buffer
    frozen = SaliencyMap(saliency.values.copy(),
                         None if saliency.upsampled is None else saliency.upsampled.copy())
    frozen.values.setflags(write=False)
    entry = ReplayEntry(image, image.label, frozen, float(confidence))

    bucket = buffer.entries.setdefault(image.label, [])
    buffer.seen[image.label] = buffer.seen.get(image.label, 0) + 1
    if len(bucket) < buffer.capacity_per_class:
        bucket.append(entry)
    else:
        slot = int(rng.integers(0, buffer.seen[image.label]))
        if slot < buffer.capacity_per_class:
            bucket[slot] = entry
    return buffer


def refresh_buffer(model: NeuralClassifier, buffer: ReplayBuffer, images: Sequence[LabeledImage],
                   rng: np.random.Generator) -> int:
    """End-of-epoch admission pass over `images` in eval mode; returns the number of candidates offered"""
    probabilities = model.probabilities(images)
    predicted = probabilities.argmax(axis=1)
    confidence = probabilities.max(axis=1)
    candidates = [i for i, image in enumerate(images)
                  if predicted[i] == image.label and confidence[i] > buffer.confidence_threshold
                  and not buffer.holds(image.source_index)]
    if not candidates:
        return 0
    chosen = [images[i] for i in candidates]
    maps = gradcam_batch(model, chosen, [image.label for image in chosen], upsample=False)
    for i, saliency in zip(candidates, maps):
        buffer_admit(buffer, images[i], int(predicted[i]), float(confidence[i]), saliency, rng)
    return len(candidates)


# ---------------------------------------------------------------- replay loss

class ReplayLoss(NamedTuple):
    total: Tensor
    task: Tensor
    replay: Optional[Tensor]
    sampled: int


def current_map(activations: Tensor, alpha: np.ndarray) -> Tensor:
    """Differentiable GradCAM map; α and the max normalizer are constants"""
    raw = relu(channel_weighted_sum(activations, alpha))
    peak = float(raw.data.max())
    return scale(raw, 1.0 / peak) if peak > 0 else raw


def saliency_replay_loss(model: NeuralClassifier, batch: Sequence[LabeledImage], buffer: ReplayBuffer,
                         weight: float, rng: np.random.Generator,
                         dropout_rng: Optional[np.random.Generator] = None,
                         include_task_loss: bool = True) -> ReplayLoss:
    """
    Task loss over the batch (plus replayed inputs when `include_task_loss`) and
    weight·mean ‖current map − stored map‖²_F over min(|buffer|, |batch|) sampled entries.
    Must be called with a tape active.
    """
    if weight < 0:
        raise ParameterError(f"replay weight must be non-negative, got {weight}")
    sampled = buffer.sample(len(batch), rng)
    replay_images = [entry.image for entry in sampled]
    alphas = channel_weights(model, replay_images, [e.label for e in sampled]) if sampled else None

    inputs = list(batch) + replay_images
    forward = model.forward(inputs, Mode.TRAIN, dropout_rng)
    if include_task_loss or not sampled:
        task_rows, task_labels = forward.log_probs, [image.label for image in inputs]
    else:
        task_rows = take_rows(forward.log_probs, list(range(len(batch))))
        task_labels = [image.label for image in batch]
    task = model.loss(task_rows, task_labels)
    if not sampled:
        return ReplayLoss(task, task, None, 0)

    terms = []
    for j, entry in enumerate(sampled):
        activations = take_rows(forward.conv2, len(batch) + j)
        terms.append(squared_distance(current_map(activations, alphas[j]), entry.saliency.values))
    replay = terms[0]
    for term in terms[1:]:
        replay = add(replay, term)
    replay = scale(replay, weight / len(terms))
    return ReplayLoss(add(task, replay), task, replay, len(sampled))
