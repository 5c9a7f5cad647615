#!/usr/bin/env python3
"""
Continual Trainer for the CQural lab
Minibatch training loops, mid-run sample injection and the forgetting diagnostics
(forgetting events, unforgettable examples, first-learning epoch, margin, label dispersion)
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from data_ingest import LabeledImage, TaskDataset
from experiment_logging import ComponentType, ExperimentLogger, get_experiment_logger
from explainability import ReplayBuffer, refresh_buffer, saliency_replay_loss
from lab_errors import ConfigError, DataError, NumericError, UsageError
from models import NeuralClassifier
from tensor_autodiff import AdamState, Mode, Tape, adam_step, backward_pass

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplaySettings:
    enabled: bool = False
    weight: float = 1.0
    capacity_per_class: int = 32
    confidence_threshold: float = 0.90
    include_task_loss: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    checkpoint_stride: int = 5
    batch_size: int = 8
    lr: float = 0.001
    seed: int = 0
    injection_epoch: int = 29
    injection_ratio: float = 0.5
    replay: ReplaySettings = field(default_factory=ReplaySettings)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be at least 1, got {self.epochs}")
        if not 1 <= self.injection_epoch <= self.epochs:
            raise ConfigError(f"training.injection_epoch must lie in [1, {self.epochs}], got {self.injection_epoch}")
        if self.injection_ratio < 0:
            raise ConfigError(f"training.injection_ratio must be non-negative, got {self.injection_ratio}")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be at least 1, got {self.batch_size}")
        if self.checkpoint_stride < 1:
            raise ConfigError(f"training.checkpoint_stride must be at least 1, got {self.checkpoint_stride}")
        if self.replay.weight < 0:
            raise ConfigError(f"replay.weight must be non-negative, got {self.replay.weight}")

    def checkpoint_epochs(self) -> List[int]:
        return list(range(self.checkpoint_stride, self.epochs + 1, self.checkpoint_stride))


@dataclass
class TrainStreams:
    """Independent generators so toggling one feature never shifts another's draws"""

    shuffle: np.random.Generator
    dropout: np.random.Generator
    replay: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TrainStreams":
        shuffle, dropout, replay = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(shuffle, dropout, replay)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: Optional[float]
    predicted: np.ndarray
    correct: np.ndarray
    probabilities: np.ndarray
    train_size: int
    buffer_size: int = 0
    test_predicted: Optional[np.ndarray] = None
    test_scores: Optional[np.ndarray] = None


@dataclass
class CorrectnessTimeline:
    """Per tracked example: predicted label and correctness at each checkpoint epoch"""

    labels: np.ndarray
    epochs: List[int] = field(default_factory=list)
    predicted: List[np.ndarray] = field(default_factory=list)
    correct: List[np.ndarray] = field(default_factory=list)

    def append(self, epoch: int, predicted: np.ndarray, correct: np.ndarray):
        if self.epochs and epoch <= self.epochs[-1]:
            raise UsageError(f"timeline epochs must increase, got {epoch} after {self.epochs[-1]}")
        if len(predicted) != len(self.labels) or len(correct) != len(self.labels):
            raise UsageError(f"timeline row has {len(correct)} entries for {len(self.labels)} tracked examples")
        self.epochs.append(int(epoch))
        self.predicted.append(np.asarray(predicted, dtype=np.int64))
        self.correct.append(np.asarray(correct, dtype=bool))

    @classmethod
    def from_correctness(cls, correct: np.ndarray, predicted: Optional[np.ndarray] = None,
                         labels: Optional[np.ndarray] = None) -> "CorrectnessTimeline":
        """Build from T×N arrays; checkpoints are numbered 1..T"""
        correct = np.atleast_2d(np.asarray(correct, dtype=bool))
        if labels is None:
            labels = np.zeros(correct.shape[1], dtype=np.int64)
        if predicted is None:
            predicted = np.where(correct, labels[None, :], 1 - labels[None, :])
        timeline = cls(labels=np.asarray(labels, dtype=np.int64))
        for t in range(correct.shape[0]):
            timeline.append(t + 1, predicted[t], correct[t])
        return timeline

    @property
    def checkpoints(self) -> int:
        return len(self.epochs)

    def correct_matrix(self) -> np.ndarray:
        return np.array(self.correct, dtype=bool).reshape(self.checkpoints, len(self.labels))

    def predicted_matrix(self) -> np.ndarray:
        return np.array(self.predicted, dtype=np.int64).reshape(self.checkpoints, len(self.labels))


@dataclass
class ForgettingStats:
    events: np.ndarray
    unforgettable: np.ndarray
    first_learned: np.ndarray
    margin: np.ndarray
    dispersion: np.ndarray

    def summary(self) -> dict:
        learned = self.first_learned >= 0
        return {
            "tracked": int(len(self.events)),
            "forgetting_events": int(self.events.sum()),
            "unforgettable": int(self.unforgettable.sum()),
            "ever_learned": int(learned.sum()),
            "mean_dispersion": float(self.dispersion.mean()) if len(self.dispersion) else 0.0,
        }


@dataclass
class ContinualResult:
    records: List[EpochRecord]
    timeline: CorrectnessTimeline
    spike: float
    injected: int
    stats: ForgettingStats

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.records]


# ---------------------------------------------------------------- diagnostics

def count_forgetting_events(timeline: CorrectnessTimeline) -> Tuple[np.ndarray, np.ndarray]:
    """Correct→incorrect transitions between consecutive checkpoints, and the unforgettable flags"""
    if timeline.checkpoints < 2:
        raise UsageError(f"forgetting needs at least 2 checkpoints, got {timeline.checkpoints}")
    correct = timeline.correct_matrix()
    events = (correct[:-1] & ~correct[1:]).sum(axis=0).astype(np.int64)
    unforgettable = (events == 0) & correct.any(axis=0)
    return events, unforgettable


def first_learning_epochs(timeline: CorrectnessTimeline) -> np.ndarray:
    """Epoch of the first correct checkpoint, -1 when never learned"""
    correct = timeline.correct_matrix()
    first = np.argmax(correct, axis=0)
    epochs = np.asarray(timeline.epochs, dtype=np.int64)
    return np.where(correct.any(axis=0), epochs[first], -1)


def label_dispersion(timeline: CorrectnessTimeline) -> np.ndarray:
    """1 - (count of the modal predicted label) / (number of checkpoints), per example"""
    if timeline.checkpoints < 1:
        raise UsageError("label dispersion needs at least 1 checkpoint")
    predicted = timeline.predicted_matrix()
    modal = np.array([np.bincount(column).max() for column in predicted.T], dtype=np.float64)
    return 1.0 - modal / timeline.checkpoints


def modal_labels(timeline: CorrectnessTimeline) -> np.ndarray:
    # argmax picks the smallest label on ties
    return np.array([np.bincount(column).argmax() for column in timeline.predicted_matrix().T], dtype=np.int64)


def misclassification_margin(probabilities, true_label):
    """p(true) - p(other); vectorised over N×2 probabilities and N labels"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim == 1:
        label = int(true_label)
        return float(probabilities[label] - probabilities[1 - label])
    labels = np.asarray(true_label, dtype=np.int64)
    rows = np.arange(len(labels))
    return probabilities[rows, labels] - probabilities[rows, 1 - labels]


def forgetting_stats(timeline: CorrectnessTimeline, final_probabilities: np.ndarray) -> ForgettingStats:
    if timeline.checkpoints >= 2:
        events, unforgettable = count_forgetting_events(timeline)
    else:
        events = np.zeros(len(timeline.labels), dtype=np.int64)
        unforgettable = timeline.correct_matrix().any(axis=0)
    return ForgettingStats(
        events=events,
        unforgettable=unforgettable,
        first_learned=first_learning_epochs(timeline),
        margin=misclassification_margin(final_probabilities, timeline.labels),
        dispersion=label_dispersion(timeline),
    )


@dataclass
class SeedStability:
    mean_events: np.ndarray
    std_events: np.ndarray
    unforgettable_fraction: np.ndarray
    seeds: int


def seed_stability(stats_per_seed: Sequence[ForgettingStats]) -> SeedStability:
    """Per tracked example, how forgetting behaves across repeated seeds"""
    if not stats_per_seed:
        raise UsageError("seed_stability needs at least one run")
    sizes = {len(stats.events) for stats in stats_per_seed}
    if len(sizes) != 1:
        raise UsageError(f"runs track different example counts: {sorted(sizes)}")
    events = np.stack([stats.events for stats in stats_per_seed]).astype(np.float64)
    flags = np.stack([stats.unforgettable for stats in stats_per_seed]).astype(np.float64)
    return SeedStability(events.mean(axis=0), events.std(axis=0), flags.mean(axis=0), len(stats_per_seed))


# ---------------------------------------------------------------- training

def _labels(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.array([image.label for image in images], dtype=np.int64)


def accuracy(model: NeuralClassifier, images: Sequence[LabeledImage]) -> Optional[float]:
    if not images:
        return None
    return float((model.predict(images).labels == _labels(images)).mean())


def train_epoch(model: NeuralClassifier, state: AdamState, train: Sequence[LabeledImage],
                streams: TrainStreams, config: TrainConfig, epoch: int = 1,
                tracked: Optional[Sequence[LabeledImage]] = None,
                test: Optional[Sequence[LabeledImage]] = None,
                buffer: Optional[ReplayBuffer] = None) -> EpochRecord:
    """One pass over seeded-shuffled minibatches, then eval-mode correctness on the tracked set"""
    tracked = train if tracked is None else tracked
    order = streams.shuffle.permutation(len(train))
    replaying = buffer is not None and config.replay.enabled
    losses = []

    for batch_index, start in enumerate(range(0, len(train), config.batch_size)):
        batch = [train[i] for i in order[start:start + config.batch_size]]
        try:
            with Tape():
                if replaying and len(buffer):
                    loss = saliency_replay_loss(model, batch, buffer, config.replay.weight, streams.replay,
                                                streams.dropout, config.replay.include_task_loss).total
                else:
                    forward = model.forward(batch, Mode.TRAIN, streams.dropout)
                    loss = model.loss(forward.log_probs, _labels(batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss is {value}")
                backward_pass(loss)
        except NumericError as e:
            raise NumericError(f"epoch {epoch}, batch {batch_index}: {e}") from e
        adam_step(model.parameters(), state)
        losses.append(value)

    if replaying:
        refresh_buffer(model, buffer, train, streams.replay)

    probabilities = model.probabilities(tracked)
    predicted = probabilities.argmax(axis=1).astype(np.int64)
    correct = predicted == _labels(tracked)
    train_accuracy = correct.mean() if train is tracked else accuracy(model, train)
    test_predictions = model.predict(test) if test else None
    return EpochRecord(
        epoch=epoch,
        loss=float(np.mean(losses)),
        train_accuracy=float(train_accuracy),
        test_accuracy=(float((test_predictions.labels == _labels(test)).mean())
                       if test_predictions is not None else None),
        predicted=predicted,
        correct=correct,
        probabilities=probabilities,
        train_size=len(train),
        buffer_size=len(buffer) if buffer is not None else 0,
        test_predicted=test_predictions.labels if test_predictions is not None else None,
        test_scores=test_predictions.scores if test_predictions is not None else None,
    )


def take_balanced(pool: Sequence[LabeledImage], count: int) -> List[LabeledImage]:
    """ceil(count/2) label-0 and floor(count/2) label-1 examples, in pool order"""
    wanted = {0: math.ceil(count / 2), 1: count // 2}
    chosen = []
    for label, need in wanted.items():
        members = [image for image in pool if image.label == label][:need]
        if len(members) < need:
            raise DataError(f"injection pool exhausted: need {need} of class {label}, {len(members)} available")
        chosen.extend(members)
    return chosen


def injection_count(config: TrainConfig, train_size: int) -> int:
    return math.ceil(config.injection_ratio * train_size) if config.injection_ratio > 0 else 0


def run_continual(model: NeuralClassifier, config: TrainConfig, task: TaskDataset,
                  experiment_logger: Optional[ExperimentLogger] = None) -> ContinualResult:
    """
    Train for config.epochs; at the start of injection_epoch append ceil(ρ·|train|) balanced
    pool examples. Δ = loss[injection_epoch] - loss[injection_epoch - 1] is always reported
    (NaN when injection happens in epoch 1).
    """
    experiment_logger = experiment_logger or get_experiment_logger()
    streams = TrainStreams.from_seed(config.seed)
    state = AdamState(lr=config.lr)
    tracked = list(task.train)
    train = tracked
    to_inject = injection_count(config, len(train))
    injected = take_balanced(task.injection_pool, to_inject) if to_inject else []
    buffer = (ReplayBuffer(config.replay.capacity_per_class, config.replay.confidence_threshold)
              if config.replay.enabled else None)

    timeline = CorrectnessTimeline(labels=_labels(tracked))
    records: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        if epoch == config.injection_epoch and injected:
            train = train + injected
            experiment_logger.info(ComponentType.TRAINER, f"💉 injected {len(injected)} samples, train set now {len(train)}",
                                   seed=config.seed, epoch=epoch)
        record = train_epoch(model, state, train, streams, config, epoch, tracked, task.test, buffer)
        records.append(record)
        timeline.append(epoch, record.predicted, record.correct)
        experiment_logger.debug(ComponentType.TRAINER, f"{model.name} loss {record.loss:.4f}",
                                seed=config.seed, epoch=epoch,
                                metadata={"train_acc": record.train_accuracy, "test_acc": record.test_accuracy,
                                          "buffer": record.buffer_size})

    losses = [record.loss for record in records]
    k = config.injection_epoch
    spike = losses[k - 1] - losses[k - 2] if k >= 2 else float("nan")
    stats = forgetting_stats(timeline, records[-1].probabilities)
    experiment_logger.info(ComponentType.TRAINER,
                           f"🏁 {model.name} finished: final loss {losses[-1]:.4f}, spike Δ {spike:+.4f}",
                           seed=config.seed, metadata=stats.summary())
    return ContinualResult(records=records, timeline=timeline, spike=spike, injected=len(injected), stats=stats)


def train_plain(model: NeuralClassifier, config: TrainConfig, task: TaskDataset,
                experiment_logger: Optional[ExperimentLogger] = None) -> ContinualResult:
    """Training without injection"""
    return run_continual(model, replace(config, injection_ratio=0.0), task, experiment_logger)
