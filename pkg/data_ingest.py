#!/usr/bin/env python3
"""
Dataset ingestion for the CQural lab
Bit-exact MNIST IDX / CIFAR-10 binary parsers and writers, two-class task construction,
train-only standardization and a seeded synthetic task for fast tests
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Tuple, Union

import numpy as np

from lab_errors import DataError, FormatError

logger = logging.getLogger(__name__)

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
STANDARDIZE_EPS = 1e-8

ByteSource = Union[bytes, bytearray, memoryview, BinaryIO]


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    source_index: int


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic"
    class_pair: Tuple[int, int] = (0, 1)
    samples_per_class: int = 100
    train_fraction: float = 0.8
    injection_ratio: float = 0.5
    injection_classes: Optional[Tuple[int, int]] = None
    seed: int = 0


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TaskDataset:
    train: List[LabeledImage]
    test: List[LabeledImage]
    injection_pool: List[LabeledImage]
    spec: DatasetSpec
    stats: Optional[ChannelStats] = None

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return self.train[0].pixels.shape

    def injection_size(self, ratio: Optional[float] = None) -> int:
        ratio = self.spec.injection_ratio if ratio is None else ratio
        return math.ceil(ratio * len(self.train))


def _read_all(source: ByteSource) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    return source.read()


# ---------------------------------------------------------------- MNIST IDX

def parse_mnist_idx(image_bytes: ByteSource, label_bytes: ByteSource) -> List[LabeledImage]:
    """Parse an IDX image/label pair into 1×rows×cols images"""
    images = _read_all(image_bytes)
    labels = _read_all(label_bytes)

    if len(images) < 16:
        raise FormatError("image header truncated", offset=len(images))
    magic, count, rows, cols = struct.unpack(">IIII", images[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise FormatError(f"image magic {magic} is not {MNIST_IMAGE_MAGIC}", offset=0)
    expected = 16 + count * rows * cols
    if len(images) != expected:
        raise FormatError(f"image payload holds {len(images) - 16} bytes, header promises {expected - 16}",
                          offset=min(len(images), expected))

    if len(labels) < 8:
        raise FormatError("label header truncated", offset=len(labels))
    label_magic, label_count = struct.unpack(">II", labels[:8])
    if label_magic != MNIST_LABEL_MAGIC:
        raise FormatError(f"label magic {label_magic} is not {MNIST_LABEL_MAGIC}", offset=0)
    if label_count != count:
        raise FormatError(f"{label_count} labels for {count} images", offset=4)
    if len(labels) != 8 + label_count:
        raise FormatError(f"label payload holds {len(labels) - 8} bytes, header promises {label_count}",
                          offset=min(len(labels), 8 + label_count))

    pixels = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols).astype(np.float64)
    values = np.frombuffer(labels, dtype=np.uint8, offset=8)
    return [LabeledImage(pixels[i], int(values[i]), i) for i in range(count)]


def write_mnist_idx(pixels: np.ndarray, labels: Sequence[int]) -> Tuple[bytes, bytes]:
    """Fixture writer: N×rows×cols uint8 images and N labels -> (image file, label file)"""
    pixels = np.asarray(pixels)
    if pixels.ndim == 4:
        pixels = pixels[:, 0]
    count, rows, cols = pixels.shape
    if len(labels) != count:
        raise DataError(f"{len(labels)} labels for {count} images")
    image_file = struct.pack(">IIII", MNIST_IMAGE_MAGIC, count, rows, cols) + pixels.astype(np.uint8).tobytes()
    label_file = struct.pack(">II", MNIST_LABEL_MAGIC, count) + np.asarray(labels, dtype=np.uint8).tobytes()
    return image_file, label_file


def _open_maybe_gzip(path: Path) -> bytes:
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        return handle.read()


def load_mnist(images_path: Union[str, Path], labels_path: Union[str, Path]) -> List[LabeledImage]:
    images = _open_maybe_gzip(Path(images_path))
    labels = _open_maybe_gzip(Path(labels_path))
    parsed = parse_mnist_idx(images, labels)
    logger.info(f"📥 Loaded {len(parsed)} MNIST images from {images_path}")
    return parsed


# ---------------------------------------------------------------- CIFAR-10 binary

def parse_cifar10_bin(data: ByteSource, index_offset: int = 0) -> List[LabeledImage]:
    """Parse 3073-byte records: label byte then R, G, B planes of 1024 bytes"""
    raw = _read_all(data)
    remainder = len(raw) % CIFAR_RECORD_BYTES
    if remainder:
        raise FormatError(f"length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}",
                          offset=len(raw) - remainder)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        record = int(bad[0])
        raise FormatError(f"label {int(labels[record])} outside 0..9", offset=record * CIFAR_RECORD_BYTES,
                          record=record)
    pixels = records[:, 1:].reshape(-1, *CIFAR_IMAGE_SHAPE).astype(np.float64)
    return [LabeledImage(pixels[i], int(labels[i]), index_offset + i) for i in range(len(records))]


def write_cifar10_bin(pixels: np.ndarray, labels: Sequence[int]) -> bytes:
    """Fixture writer: N×3×32×32 uint8 images and N labels -> CIFAR-10 binary batch"""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES - 1)
    if len(labels) != pixels.shape[0]:
        raise DataError(f"{len(labels)} labels for {pixels.shape[0]} images")
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def load_cifar10(batch_paths: Sequence[Union[str, Path]]) -> List[LabeledImage]:
    images: List[LabeledImage] = []
    for path in batch_paths:
        images.extend(parse_cifar10_bin(_open_maybe_gzip(Path(path)), index_offset=len(images)))
    logger.info(f"📥 Loaded {len(images)} CIFAR-10 images from {len(batch_paths)} batch file(s)")
    return images


# ---------------------------------------------------------------- task construction

def injection_classes_problem(class_pair: Sequence[int],
                             injection_classes: Optional[Sequence[int]]) -> Optional[str]:
    """
    injection_classes[i] feeds binary label i, as class_pair[i] does. A class present in both
    must sit at the same position, otherwise its injected copies would carry the opposite label.
    """
    if injection_classes is None:
        return None
    if len(injection_classes) != 2 or injection_classes[0] == injection_classes[1]:
        return f"injection_classes must be two distinct class ids, got {list(injection_classes)}"
    for position, cls in enumerate(injection_classes):
        if cls in class_pair and list(class_pair).index(cls) != position:
            return (f"injection class {cls} is binary label {list(class_pair).index(cls)} in class_pair "
                    f"{list(class_pair)} but sits at position {position} in injection_classes")
    return None


def build_task(full: Sequence[LabeledImage], spec: DatasetSpec, rng: np.random.Generator) -> TaskDataset:
    """
    Draw samples_per_class of each class in the pair, split them stratified into train/test,
    reserve a disjoint balanced injection pool and relabel everything to {0, 1}.
    Pool images from injection_classes[i] get label i.
    """
    problem = injection_classes_problem(spec.class_pair, spec.injection_classes)
    if problem:
        raise DataError(problem)
    labels = np.array([image.label for image in full], dtype=np.int64)
    train_per_class = int(round(spec.samples_per_class * spec.train_fraction))
    pool_total = math.ceil(spec.injection_ratio * 2 * train_per_class)
    pool_per_label = [math.ceil(pool_total / 2), pool_total // 2]
    pool_sources = tuple(spec.injection_classes) if spec.injection_classes else tuple(spec.class_pair)

    train: List[LabeledImage] = []
    test: List[LabeledImage] = []
    leftovers = {}
    for new_label, cls in enumerate(spec.class_pair):
        positions = np.flatnonzero(labels == cls)
        required = spec.samples_per_class
        required += sum(need for src, need in zip(pool_sources, pool_per_label) if src == cls)
        if len(positions) < required:
            raise DataError(f"class {cls} needs {required} examples, {len(positions)} available")
        order = rng.permutation(positions)
        chosen = order[:spec.samples_per_class]
        leftovers[cls] = order[spec.samples_per_class:]
        train.extend(_relabel(full[i], new_label) for i in chosen[:train_per_class])
        test.extend(_relabel(full[i], new_label) for i in chosen[train_per_class:])

    pool: List[LabeledImage] = []
    for new_label, (cls, need) in enumerate(zip(pool_sources, pool_per_label)):
        if cls not in leftovers:
            leftovers[cls] = rng.permutation(np.flatnonzero(labels == cls))
        available = leftovers[cls]
        if len(available) < need:
            raise DataError(f"injection pool needs {need} examples of class {cls}, {len(available)} available")
        pool.extend(_relabel(full[i], new_label) for i in available[:need])
        leftovers[cls] = available[need:]

    logger.info(f"🧩 Built task {spec.name} {spec.class_pair}: "
                f"train={len(train)} test={len(test)} pool={len(pool)}")
    return TaskDataset(train=train, test=test, injection_pool=pool, spec=spec)


def _relabel(image: LabeledImage, label: int) -> LabeledImage:
    return LabeledImage(image.pixels, label, image.source_index)


# ---------------------------------------------------------------- standardization

def channel_stats(images: Sequence[LabeledImage]) -> ChannelStats:
    if not images:
        raise DataError("cannot compute channel statistics of an empty partition")
    stacked = np.stack([image.pixels for image in images])
    return ChannelStats(mean=stacked.mean(axis=(0, 2, 3)), std=stacked.std(axis=(0, 2, 3)))


def apply_standardization(images: Sequence[LabeledImage], stats: ChannelStats) -> List[LabeledImage]:
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None] + STANDARDIZE_EPS
    return [LabeledImage((image.pixels - mean) / std, image.label, image.source_index) for image in images]


def standardize(images: Sequence[LabeledImage], stats_from: Sequence[LabeledImage]
                ) -> Tuple[List[LabeledImage], ChannelStats]:
    """(x - mean)/(std + 1e-8) with per-channel statistics of `stats_from` only"""
    stats = channel_stats(stats_from)
    return apply_standardization(images, stats), stats


def standardize_task(task: TaskDataset) -> TaskDataset:
    stats = channel_stats(task.train)
    return replace(
        task,
        train=apply_standardization(task.train, stats),
        test=apply_standardization(task.test, stats),
        injection_pool=apply_standardization(task.injection_pool, stats),
        stats=stats,
    )


# ---------------------------------------------------------------- synthetic task

SYNTHETIC_NOISE = 40


def _blob_template(shape: Tuple[int, int, int], label: int) -> np.ndarray:
    channels, height, width = shape
    side_h, side_w = max(2, height // 4), max(2, width // 4)
    top, left = height // 8, width // 8
    if label == 1:
        top, left = height - top - side_h, width - left - side_w
    template = np.zeros(shape)
    template[:, top:top + side_h, left:left + side_w] = 1.0
    return template


def synthetic_images(image_shape: Tuple[int, int, int], margin: float, count_per_class: int,
                     rng: np.random.Generator) -> List[LabeledImage]:
    """
    Bright square blobs at class-dependent corners on bounded integer noise in [0, 40].
    Blob intensity 40·(1 + margin) keeps the classes linearly separable by the
    difference of the two blob masks with margin proportional to `margin`.
    """
    if margin <= 0:
        raise DataError(f"synthetic margin must be positive, got {margin}")
    intensity = SYNTHETIC_NOISE * (1.0 + margin)
    images = []
    for index in range(2 * count_per_class):
        label = index % 2
        noise = rng.integers(0, SYNTHETIC_NOISE + 1, size=image_shape)
        pixels = np.clip(np.round(noise + intensity * _blob_template(image_shape, label)), 0, 255)
        images.append(LabeledImage(pixels.astype(np.float64), label, index))
    return images


def synthetic_task(image_shape: Tuple[int, int, int] = (1, 16, 16), margin: float = 1.0,
                   count_per_class: int = 20, seed: int = 0, train_fraction: float = 0.8,
                   injection_ratio: float = 0.5) -> TaskDataset:
    """Seeded two-class blob task, partitioned like the real datasets"""
    rng = np.random.default_rng(seed)
    train_per_class = int(round(count_per_class * train_fraction))
    pool_per_class = math.ceil(math.ceil(injection_ratio * 2 * train_per_class) / 2)
    full = synthetic_images(tuple(image_shape), margin, count_per_class + pool_per_class, rng)
    spec = DatasetSpec(name="synthetic", class_pair=(0, 1), samples_per_class=count_per_class,
                       train_fraction=train_fraction, injection_ratio=injection_ratio, seed=seed)
    return build_task(full, spec, rng)


def load_full_dataset(name: str, paths: dict) -> List[LabeledImage]:
    """Read a real dataset from the local files named in the config"""
    if name == "mnist":
        return load_mnist(paths["mnist_images"], paths["mnist_labels"])
    if name == "cifar10":
        batches = paths.get("cifar10_batches") or []
        if not batches:
            raise DataError("cifar10 needs at least one batch file in dataset.paths.cifar10_batches")
        return load_cifar10(batches)
    raise DataError(f"no file loader for dataset '{name}'")
