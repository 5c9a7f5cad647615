"""Shared pytest fixtures for the CQural lab suites"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from data_ingest import standardize_task, synthetic_task
from models import CquralConfig

DATA_DIR = Path(os.getenv("CQURAL_DATA_DIR", "data"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """8×8 single-channel network small enough for finite-difference checks"""
    return CquralConfig(input_shape=(1, 8, 8), conv1=2, conv2=3, kernel_size=3, fc4=4, dropout=0.25, seed=7)


@pytest.fixture
def tiny_task():
    return standardize_task(synthetic_task(image_shape=(1, 8, 8), margin=1.5, count_per_class=10, seed=3))


@pytest.fixture
def small_task():
    return standardize_task(synthetic_task(image_shape=(1, 10, 10), margin=1.5, count_per_class=20, seed=11))


@pytest.fixture
def smoke_config_file(tmp_path):
    """Config for a seconds-long synthetic CLI run"""
    config = {
        "dataset": {"samples_per_class": 8, "synthetic": {"image_shape": [1, 10, 10]}},
        "model": {"conv1": 2, "conv2": 3, "kernel_size": 3, "fc4": 8},
        "training": {"epochs": 4, "injection_epoch": 3, "checkpoint_stride": 2},
        "explain": {"max_images": 2},
        "baselines": {"svm_epochs": 5, "qnn_epochs": 5},
        "run": {"seeds": [0], "output_dir": str(tmp_path / "out")},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def mnist_files():
    images = DATA_DIR / "train-images-idx3-ubyte"
    labels = DATA_DIR / "train-labels-idx1-ubyte"
    return (images, labels) if images.exists() and labels.exists() else None


def cifar_batch():
    batch = DATA_DIR / "data_batch_1.bin"
    return batch if batch.exists() else None
