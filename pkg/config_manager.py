#!/usr/bin/env python3
"""
Configuration manager for CQural experiments
JSON config merged over materialized defaults, unknown keys rejected, full default echo
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from data_ingest import DatasetSpec, injection_classes_problem
from lab_errors import ConfigError
from models import CquralConfig
from quantum_sim import HeadMode
from continual_trainer import ReplaySettings, TrainConfig

logger = logging.getLogger(__name__)

DATASETS = ("mnist", "cifar10", "synthetic")
MODELS = ("cqural", "cnn", "svm", "hybrid_svm", "qnn")
HEAD_MODES = tuple(mode.value for mode in HeadMode)


class ExperimentConfiguration:
    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config_file = config_file
        self.default_config = {
            "dataset": {
                "name": "synthetic",
                "paths": {
                    "mnist_images": "train-images-idx3-ubyte",
                    "mnist_labels": "train-labels-idx1-ubyte",
                    "cifar10_batches": ["data_batch_1.bin"],
                },
                "class_pair": [0, 1],
                "samples_per_class": 100,
                "train_fraction": 0.8,
                "injection_ratio": 0.5,
                "injection_classes": None,
                "task_seed": 0,
                "synthetic": {
                    "image_shape": [1, 16, 16],
                    "margin": 1.0,
                },
            },
            "model": {
                "name": "cqural",
                "kernel_size": 5,
                "conv1": 8,
                "conv2": 16,
                "fc4": 32,
                "dropout": 0.25,
                "head_mode": "amplitude",
                "shots": 0,
            },
            "training": {
                "epochs": 30,
                "checkpoint_stride": 5,
                "batch_size": 8,
                "lr": 0.001,
                "injection_epoch": 29,
            },
            "replay": {
                "enabled": False,
                "weight": 1.0,
                "capacity_per_class": 32,
                "confidence_threshold": 0.9,
                "include_task_loss": True,
            },
            "baselines": {
                "svm_lambda": 1e-4,
                "svm_epochs": 50,
                "lssvm_gamma": 10.0,
                "qnn_epochs": 100,
                "qnn_lr": 0.05,
            },
            "explain": {
                "enabled": True,
                "alpha": 0.5,
                "max_images": 8,
            },
            "run": {
                "seeds": [0, 1, 2, 3, 4],
                "output_dir": "out",
                "max_parallel_runs": 1,
                "save_checkpoint": False,
            },
        }
        self.config = self.load_config()
        if overrides:
            self.config = self.merge_configs(self.config, overrides)
        self.validate()

    def load_config(self) -> Dict[str, Any]:
        """Defaults, with the config file merged over them when one is given"""
        if self.config_file is None:
            return copy.deepcopy(self.default_config)
        if not os.path.exists(self.config_file):
            raise ConfigError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_file} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{self.config_file} must hold a JSON object")
        return self.merge_configs(self.default_config, user)

    def save_config(self, path: str) -> str:
        """Write the fully materialized config (the echo)"""
        with open(path, "w") as f:
            f.write(self.echo())
        logger.info(f"Configuration echoed to {path}")
        return path

    def echo(self) -> str:
        return json.dumps(self.config, indent=2, sort_keys=True) + "\n"

    def merge_configs(self, default: Dict[str, Any], user: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
        """Recursively merge user config with defaults, rejecting unknown keys"""
        result = copy.deepcopy(default)
        for key, value in user.items():
            dotted = f"{prefix}{key}"
            if key not in result:
                raise ConfigError(f"unknown config key '{dotted}'")
            if isinstance(result[key], dict) and key != "paths":
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{dotted}' must be an object")
                result[key] = self.merge_configs(result[key], value, prefix=f"{dotted}.")
            elif key == "paths":
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{dotted}' must be an object")
                unknown = sorted(set(value) - set(result[key]))
                if unknown:
                    raise ConfigError(f"unknown config key '{dotted}.{unknown[0]}'")
                result[key].update(value)
            else:
                result[key] = value
        return result

    def validate(self):
        c = self.config
        self._choice("dataset.name", c["dataset"]["name"], DATASETS)
        self._choice("model.name", c["model"]["name"], MODELS)
        self._choice("model.head_mode", c["model"]["head_mode"], HEAD_MODES)
        pair = c["dataset"]["class_pair"]
        if not isinstance(pair, list) or len(pair) != 2 or pair[0] == pair[1]:
            raise ConfigError(f"dataset.class_pair must be two distinct class ids, got {pair}")
        injection_classes = c["dataset"]["injection_classes"]
        if injection_classes is not None and (not isinstance(injection_classes, list) or len(injection_classes) != 2):
            raise ConfigError(f"dataset.injection_classes must be null or two class ids, got {injection_classes}")
        problem = injection_classes_problem(pair, injection_classes)
        if problem:
            raise ConfigError(f"dataset.{problem}")
        self._at_least("dataset.samples_per_class", c["dataset"]["samples_per_class"], 2)
        if not 0.0 < c["dataset"]["train_fraction"] < 1.0:
            raise ConfigError(f"dataset.train_fraction must lie in (0, 1), got {c['dataset']['train_fraction']}")
        if c["dataset"]["injection_ratio"] < 0:
            raise ConfigError(f"dataset.injection_ratio must be non-negative, got {c['dataset']['injection_ratio']}")
        if c["dataset"]["synthetic"]["margin"] <= 0:
            raise ConfigError("dataset.synthetic.margin must be positive")
        if len(c["dataset"]["synthetic"]["image_shape"]) != 3:
            raise ConfigError("dataset.synthetic.image_shape must be [C, H, W]")
        task_seed = c["dataset"]["task_seed"]
        if task_seed is not None and (isinstance(task_seed, bool) or not isinstance(task_seed, int)):
            raise ConfigError(f"dataset.task_seed must be null or an integer, got {task_seed!r}")

        self._at_least("model.kernel_size", c["model"]["kernel_size"], 1)
        for key in ("conv1", "conv2", "fc4"):
            self._at_least(f"model.{key}", c["model"][key], 1)
        if not 0.0 <= c["model"]["dropout"] < 1.0:
            raise ConfigError(f"model.dropout must lie in [0, 1), got {c['model']['dropout']}")
        self._at_least("model.shots", c["model"]["shots"], 0)

        t = c["training"]
        self._at_least("training.epochs", t["epochs"], 1)
        if not 1 <= t["injection_epoch"] <= t["epochs"]:
            raise ConfigError(f"training.injection_epoch must lie in [1, {t['epochs']}], got {t['injection_epoch']}")
        self._at_least("training.checkpoint_stride", t["checkpoint_stride"], 1)
        self._at_least("training.batch_size", t["batch_size"], 1)
        if t["lr"] < 0:
            raise ConfigError(f"training.lr must be non-negative, got {t['lr']}")

        if c["replay"]["weight"] < 0:
            raise ConfigError(f"replay.weight must be non-negative, got {c['replay']['weight']}")
        self._at_least("replay.capacity_per_class", c["replay"]["capacity_per_class"], 1)
        if not 0.0 <= c["explain"]["alpha"] <= 1.0:
            raise ConfigError(f"explain.alpha must lie in [0, 1], got {c['explain']['alpha']}")

        seeds = c["run"]["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError(f"run.seeds must be a non-empty list of integers, got {seeds}")
        self._at_least("run.max_parallel_runs", c["run"]["max_parallel_runs"], 1)

    @staticmethod
    def _choice(key: str, value: Any, allowed: Tuple[str, ...]):
        if value not in allowed:
            raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got '{value}'")

    @staticmethod
    def _at_least(key: str, value: Any, minimum: int):
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigError(f"{key} must be an integer >= {minimum}, got {value!r}")

    # ------------------------------------------------------------ overrides

    def set_seeds(self, seeds: List[int]):
        self.config["run"]["seeds"] = list(seeds)
        self.validate()

    def set_output_dir(self, output_dir: str):
        self.config["run"]["output_dir"] = output_dir

    def set_model(self, name: str):
        self.config["model"]["name"] = name
        self.validate()

    # ------------------------------------------------------------ typed views

    @property
    def dataset_name(self) -> str:
        return self.config["dataset"]["name"]

    @property
    def model_name(self) -> str:
        return self.config["model"]["name"]

    @property
    def seeds(self) -> List[int]:
        return list(self.config["run"]["seeds"])

    @property
    def output_dir(self) -> Path:
        return Path(self.config["run"]["output_dir"])

    def resolved_paths(self) -> Dict[str, Any]:
        """Dataset paths, relative ones resolved against CQURAL_DATA_DIR when it is set"""
        base = os.getenv("CQURAL_DATA_DIR")
        paths = copy.deepcopy(self.config["dataset"]["paths"])

        def resolve(value: str) -> str:
            return str(Path(base) / value) if base and not os.path.isabs(value) else value

        paths["mnist_images"] = resolve(paths["mnist_images"])
        paths["mnist_labels"] = resolve(paths["mnist_labels"])
        paths["cifar10_batches"] = [resolve(p) for p in paths["cifar10_batches"]]
        return paths

    def task_seed(self, run_seed: int) -> int:
        """Seed for task construction: shared across runs unless dataset.task_seed is null"""
        fixed = self.config["dataset"]["task_seed"]
        return run_seed if fixed is None else fixed

    def dataset_spec(self, seed: int) -> DatasetSpec:
        d = self.config["dataset"]
        injection_classes = tuple(d["injection_classes"]) if d["injection_classes"] else None
        return DatasetSpec(name=d["name"], class_pair=tuple(d["class_pair"]), samples_per_class=d["samples_per_class"],
                           train_fraction=d["train_fraction"], injection_ratio=d["injection_ratio"],
                           injection_classes=injection_classes, seed=seed)

    def cqural_config(self, input_shape: Tuple[int, int, int], seed: int) -> CquralConfig:
        m = self.config["model"]
        return CquralConfig(input_shape=tuple(input_shape), conv1=m["conv1"], conv2=m["conv2"],
                            kernel_size=m["kernel_size"], fc4=m["fc4"], dropout=m["dropout"],
                            head_mode=HeadMode(m["head_mode"]), shots=m["shots"], seed=seed)

    def replay_settings(self) -> ReplaySettings:
        r = self.config["replay"]
        return ReplaySettings(enabled=r["enabled"], weight=r["weight"], capacity_per_class=r["capacity_per_class"],
                              confidence_threshold=r["confidence_threshold"], include_task_loss=r["include_task_loss"])

    def train_config(self, seed: int, injection: bool = True) -> TrainConfig:
        t = self.config["training"]
        return TrainConfig(epochs=t["epochs"], checkpoint_stride=t["checkpoint_stride"], batch_size=t["batch_size"],
                           lr=t["lr"], seed=seed, injection_epoch=t["injection_epoch"],
                           injection_ratio=self.config["dataset"]["injection_ratio"] if injection else 0.0,
                           replay=self.replay_settings())

    def get_config_summary(self) -> Dict[str, Any]:
        """Get a summary of current configuration"""
        return {
            "dataset": self.dataset_name,
            "model": self.model_name,
            "head": f"{self.config['model']['head_mode']} (shots={self.config['model']['shots']})",
            "epochs": self.config["training"]["epochs"],
            "injection": f"epoch {self.config['training']['injection_epoch']}, "
                         f"ratio {self.config['dataset']['injection_ratio']}",
            "replay": self.config["replay"]["enabled"],
            "seeds": self.seeds,
        }


def create_sample_config(path: str = "sample_config.json") -> str:
    """Write a small synthetic-task config suitable for a first run"""
    config = ExperimentConfiguration(overrides={
        "training": {"epochs": 10, "injection_epoch": 8},
        "dataset": {"samples_per_class": 20, "synthetic": {"image_shape": [1, 12, 12]}},
        "run": {"seeds": [0]},
    })
    return config.save_config(path)


if __name__ == "__main__":
    config = ExperimentConfiguration()
    print("Current configuration summary:")
    print(json.dumps(config.get_config_summary(), indent=2))
    print(f"Sample configuration written to {create_sample_config()}")
