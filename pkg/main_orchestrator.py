#!/usr/bin/env python3
"""
Main orchestrator for the CQural continual-learning lab
Builds the task for each seed, trains the requested models, and writes the per-seed
metrics, curves, forgetting tables, saliency overlays and the cross-seed summaries
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from baselines import HybridSVMClassifier, LinearSVMClassifier, PureQNNClassifier
from checkpoint_store import CheckpointStore
from config_manager import MODELS, ExperimentConfiguration
from continual_trainer import (CorrectnessTimeline, EpochRecord, ForgettingStats, run_continual, seed_stability,
                               train_plain)
from data_ingest import TaskDataset, build_task, load_full_dataset, standardize_task, synthetic_task
from experiment_logging import ComponentType, ExperimentLogger, LoggedOperation, get_experiment_logger
from explainability import gradcam_batch
from lab_errors import ConfigError, LabError
from models import BinaryClassifier, NEURAL_MODELS, build_neural_model
from report_writer import (MetricsRow, classification_report, compute_metrics, emit_ppm_overlay, emit_svg_plot,
                           fixed, percent, pr_points, reference_comparison, roc_points, write_atomic, write_csv)
from run_manager import RunManager, RunTask

load_dotenv()

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "continual", "compare", "explain", "selftest")
COMPANION = {"cqural": "cnn", "cnn": "cqural"}

METRICS_COLUMNS = ("epoch", "loss", "accuracy_pct", "precision_0", "precision_1", "recall_0", "recall_1",
                   "tn", "fp", "fn", "tp", "test_size")
PREDICTION_COLUMNS = ("epoch", "index", "source_index", "truth", "predicted", "score_1")
LOSS_COLUMNS = ("epoch", "model", "loss", "train_accuracy_pct", "test_accuracy_pct", "train_size")
FORGETTING_COLUMNS = ("index", "source_index", "label", "forgetting_events", "unforgettable",
                      "first_learned_epoch", "final_margin", "label_dispersion")
TIMELINE_COLUMNS = ("epoch", "example", "source_index", "predicted", "correct")
COMPARE_COLUMNS = ("seed", "model", "accuracy_pct", "precision_0", "precision_1", "recall_0", "recall_1", "auc")
SPIKE_COLUMNS = ("seed", "delta_cqural", "delta_cnn", "ratio")
STABILITY_COLUMNS = ("index", "mean_forgetting_events", "std_forgetting_events", "unforgettable_fraction", "seeds")


def metrics_row_cells(row: MetricsRow) -> List[Any]:
    (tn, fp), (fn, tp) = row.confusion.tolist()
    return [row.epoch, fixed(row.loss), percent(row.accuracy), fixed(row.precision[0]), fixed(row.precision[1]),
            fixed(row.recall[0]), fixed(row.recall[1]), tn, fp, fn, tp, row.total]


def build_classifier(name: str, config: ExperimentConfiguration, input_shape, seed: int) -> BinaryClassifier:
    b = config.config["baselines"]
    if name in NEURAL_MODELS:
        return build_neural_model(name, config.cqural_config(input_shape, seed))
    if name == "svm":
        return LinearSVMClassifier(lam=b["svm_lambda"], epochs=b["svm_epochs"], seed=seed)
    if name == "hybrid_svm":
        return HybridSVMClassifier(gamma=b["lssvm_gamma"])
    if name == "qnn":
        return PureQNNClassifier(epochs=b["qnn_epochs"], lr=b["qnn_lr"])
    raise ConfigError(f"unknown model '{name}', expected one of {', '.join(MODELS)}")


class LabOrchestrator:
    """Everything one seed run does; one instance per (config, seed)"""

    def __init__(self, config: ExperimentConfiguration, seed: int):
        self.config = config
        self.seed = seed
        self.out = config.output_dir / f"seed_{seed}"

    # ------------------------------------------------------------ task

    def load_task(self) -> TaskDataset:
        d = self.config.config["dataset"]
        task_seed = self.config.task_seed(self.seed)
        with LoggedOperation(ComponentType.DATA, f"build {d['name']} task", seed=self.seed):
            if d["name"] == "synthetic":
                task = synthetic_task(image_shape=tuple(d["synthetic"]["image_shape"]),
                                      margin=d["synthetic"]["margin"], count_per_class=d["samples_per_class"],
                                      seed=task_seed, train_fraction=d["train_fraction"],
                                      injection_ratio=d["injection_ratio"])
            else:
                full = load_full_dataset(d["name"], self.config.resolved_paths())
                task = build_task(full, self.config.dataset_spec(task_seed), np.random.default_rng(task_seed))
        return standardize_task(task)

    # ------------------------------------------------------------ commands

    def run(self, command: str) -> Dict[str, Any]:
        self.out.mkdir(parents=True, exist_ok=True)
        write_atomic(self.out / "config_echo.json", self.config.echo())
        task = self.load_task()
        with LoggedOperation(ComponentType.SYSTEM, f"{command} seed {self.seed}", seed=self.seed):
            if command == "compare":
                return self.compare(task)
            return self.train_neural(task, command)

    def train_neural(self, task: TaskDataset, command: str) -> Dict[str, Any]:
        name = self.config.model_name
        if command != "train" and name not in NEURAL_MODELS:
            raise ConfigError(f"'{command}' needs a neural model (cqural or cnn), got '{name}'")
        if name not in NEURAL_MODELS:
            return self.train_baseline(task, name)

        continual = command == "continual"
        model = build_classifier(name, self.config, task.image_shape, self.seed)
        train_config = self.config.train_config(self.seed, injection=continual)
        result = run_continual(model, train_config, task) if continual else train_plain(model, train_config, task)

        rows = self.write_epoch_outputs(task, result.records, train_config.checkpoint_epochs())
        self.write_forgetting(task, result.stats)
        self.write_timeline(task, result.timeline)
        self.write_curves(task, result.records[-1])
        series = {name: result.records}
        summary: Dict[str, Any] = {"seed": self.seed, "model": name, "spike": {name: result.spike},
                                   "stats": self.stats_payload(result.stats)}

        if continual:
            companion_name = COMPANION[name]
            companion = build_classifier(companion_name, self.config, task.image_shape, self.seed)
            companion_result = run_continual(companion, train_config, task)
            series[companion_name] = companion_result.records
            summary["spike"][companion_name] = companion_result.spike
        self.write_loss_curve(series)

        if self.config.config["explain"]["enabled"] or command == "explain":
            limit = None if command == "explain" else self.config.config["explain"]["max_images"]
            self.write_saliency(model, task, limit)
        if self.config.config["run"]["save_checkpoint"]:
            CheckpointStore(self.out).save("model", model.parameters())

        comparison = reference_comparison(self.config.dataset_name, name, rows)
        if comparison:
            summary["reference"] = comparison
        return summary

    def train_baseline(self, task: TaskDataset, name: str) -> Dict[str, Any]:
        classifier = build_classifier(name, self.config, task.image_shape, self.seed)
        with LoggedOperation(ComponentType.MODEL, f"fit {name}", seed=self.seed):
            classifier.fit(task.train)
        predictions = classifier.predict(task.test)
        truths = [image.label for image in task.test]
        row = compute_metrics(predictions.labels, truths, predictions.scores)
        write_csv(self.out / "metrics.csv", METRICS_COLUMNS, [metrics_row_cells(row)])
        write_csv(self.out / "predictions.csv", PREDICTION_COLUMNS, self.prediction_rows(None, task, predictions.labels,
                                                                                          predictions.scores))
        write_atomic(self.out / "classification_report.txt", classification_report(row))
        self.write_scored_curves(predictions.scores, truths)
        return {"seed": self.seed, "model": name, "spike": {}, "stats": None}

    def compare(self, task: TaskDataset) -> Dict[str, Any]:
        """All five models on one task, no injection"""
        truths = [image.label for image in task.test]
        rows = []
        for name in MODELS:
            classifier = build_classifier(name, self.config, task.image_shape, self.seed)
            with LoggedOperation(ComponentType.MODEL, f"compare {name}", seed=self.seed):
                if name in NEURAL_MODELS:
                    train_plain(classifier, self.config.train_config(self.seed, injection=False), task)
                else:
                    classifier.fit(task.train)
            predictions = classifier.predict(task.test)
            metrics = compute_metrics(predictions.labels, truths, predictions.scores)
            auc = roc_points(predictions.scores, truths).area if len(set(truths)) == 2 else None
            rows.append([self.seed, name, percent(metrics.accuracy), fixed(metrics.precision[0]),
                         fixed(metrics.precision[1]), fixed(metrics.recall[0]), fixed(metrics.recall[1]), fixed(auc)])
        write_csv(self.out / "compare.csv", COMPARE_COLUMNS, rows)
        return {"seed": self.seed, "model": "compare", "spike": {}, "stats": None, "compare": rows}

    # ------------------------------------------------------------ outputs

    def prediction_rows(self, epoch: Optional[int], task: TaskDataset, predicted, scores) -> List[List[Any]]:
        return [[epoch, i, image.source_index, image.label, int(predicted[i]), float(scores[i])]
                for i, image in enumerate(task.test)]

    def write_epoch_outputs(self, task: TaskDataset, records: Sequence[EpochRecord],
                            checkpoints: Sequence[int]) -> List[MetricsRow]:
        """metrics.csv and predictions.csv at the checkpoint epochs and the final epoch"""
        wanted = sorted(set(checkpoints) | {records[-1].epoch})
        truths = [image.label for image in task.test]
        metric_rows: List[MetricsRow] = []
        prediction_rows: List[List[Any]] = []
        for record in records:
            if record.epoch not in wanted or record.test_predicted is None:
                continue
            row = compute_metrics(record.test_predicted, truths, record.test_scores)
            row.epoch, row.loss = record.epoch, record.loss
            metric_rows.append(row)
            prediction_rows.extend(self.prediction_rows(record.epoch, task, record.test_predicted, record.test_scores))
        write_csv(self.out / "metrics.csv", METRICS_COLUMNS, [metrics_row_cells(row) for row in metric_rows])
        write_csv(self.out / "predictions.csv", PREDICTION_COLUMNS, prediction_rows)
        if metric_rows:
            write_atomic(self.out / "classification_report.txt", classification_report(metric_rows[-1]))
        return metric_rows

    def write_curves(self, task: TaskDataset, final: EpochRecord):
        if final.test_scores is None:
            return
        self.write_scored_curves(final.test_scores, [image.label for image in task.test])

    def write_scored_curves(self, scores, truths: Sequence[int]):
        if len(set(truths)) < 2:
            logger.warning(f"⚠️ Seed {self.seed}: test set holds one class, skipping ROC/PR curves")
            return
        roc = roc_points(scores, truths)
        pr = pr_points(scores, truths)
        write_csv(self.out / "roc_curve.csv", ("fpr", "tpr", "threshold", "auc"),
                  [[fpr, tpr, threshold, roc.area] for (fpr, tpr), threshold in zip(roc.points, roc.thresholds)])
        write_csv(self.out / "pr_curve.csv", ("recall", "precision", "threshold", "average_precision"),
                  [[recall, precision, threshold, pr.area]
                   for (recall, precision), threshold in zip(pr.points, pr.thresholds)])

    def write_loss_curve(self, series: Dict[str, Sequence[EpochRecord]]):
        rows = [[record.epoch, name, record.loss, percent(record.train_accuracy), percent(record.test_accuracy),
                 record.train_size]
                for name, records in series.items() for record in records]
        write_csv(self.out / "loss_curve.csv", LOSS_COLUMNS, rows)
        plot = {name: ([r.epoch for r in records], [r.loss for r in records]) for name, records in series.items()}
        write_atomic(self.out / "loss_curve.svg",
                     emit_svg_plot(plot, title=f"Training loss, seed {self.seed}", x_label="epoch", y_label="loss"))

    def write_forgetting(self, task: TaskDataset, stats: ForgettingStats):
        rows = [[i, image.source_index, image.label, int(stats.events[i]), bool(stats.unforgettable[i]),
                 int(stats.first_learned[i]), float(stats.margin[i]), float(stats.dispersion[i])]
                for i, image in enumerate(task.train)]
        write_csv(self.out / "forgetting.csv", FORGETTING_COLUMNS, rows)

    def write_timeline(self, task: TaskDataset, timeline: CorrectnessTimeline):
        """One row per tracked train example per recorded epoch"""
        predicted, correct = timeline.predicted_matrix(), timeline.correct_matrix()
        rows = [[epoch, i, image.source_index, int(predicted[t, i]), bool(correct[t, i])]
                for t, epoch in enumerate(timeline.epochs) for i, image in enumerate(task.train)]
        write_csv(self.out / "timeline.csv", TIMELINE_COLUMNS, rows)

    def write_saliency(self, model, task: TaskDataset, limit: Optional[int]):
        images = list(task.test if limit is None else task.test[:limit])
        if not images:
            return
        alpha = self.config.config["explain"]["alpha"]
        targets = model.predict(images).labels
        with LoggedOperation(ComponentType.EXPLAIN, f"gradcam over {len(images)} images", seed=self.seed):
            maps = gradcam_batch(model, images, targets)
        for number, (image, saliency) in enumerate(zip(images, maps)):
            write_atomic(self.out / f"saliency_{number:04d}.ppm", emit_ppm_overlay(image.pixels, saliency.upsampled, alpha))

    @staticmethod
    def stats_payload(stats: ForgettingStats) -> Dict[str, list]:
        return {"events": stats.events.tolist(), "unforgettable": stats.unforgettable.tolist(),
                "first_learned": stats.first_learned.tolist(), "margin": stats.margin.tolist(),
                "dispersion": stats.dispersion.tolist()}


def run_seed(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Process-pool entry point: rebuild the config from its materialized dict and run one seed"""
    config = ExperimentConfiguration(overrides=payload["config"])
    return LabOrchestrator(config, payload["seed"]).run(payload["command"])


def stats_from_payload(payload: Dict[str, list]) -> ForgettingStats:
    return ForgettingStats(events=np.asarray(payload["events"], dtype=np.int64),
                           unforgettable=np.asarray(payload["unforgettable"], dtype=bool),
                           first_learned=np.asarray(payload["first_learned"], dtype=np.int64),
                           margin=np.asarray(payload["margin"], dtype=np.float64),
                           dispersion=np.asarray(payload["dispersion"], dtype=np.float64))


def write_summaries(config: ExperimentConfiguration, command: str, results: List[Dict[str, Any]]):
    """Experiment-root tables that span seeds"""
    root = config.output_dir
    if command == "continual":
        rows = []
        for result in results:
            hybrid, classical = result["spike"].get("cqural"), result["spike"].get("cnn")
            ratio = hybrid / classical if classical not in (None, 0.0) and not math.isnan(classical) else None
            rows.append([result["seed"], fixed(hybrid), fixed(classical), fixed(ratio)])
        write_csv(root / "spike_summary.csv", SPIKE_COLUMNS, rows)
    if command == "compare":
        write_csv(root / "compare.csv", COMPARE_COLUMNS, [row for result in results for row in result["compare"]])

    per_seed = [stats_from_payload(result["stats"]) for result in results if result.get("stats")]
    if len(per_seed) > 1:
        stability = seed_stability(per_seed)
        write_csv(root / "forgetting_stability.csv", STABILITY_COLUMNS,
                  [[i, float(stability.mean_events[i]), float(stability.std_events[i]),
                    float(stability.unforgettable_fraction[i]), stability.seeds]
                   for i in range(len(stability.mean_events))])


def run_summary(manager: RunManager, experiment_logger: ExperimentLogger) -> Dict[str, Any]:
    """Run outcomes plus the logger's error and timing accounting for this process"""
    metrics = experiment_logger.get_metrics()
    return {"runs": manager.get_status(), "errors": metrics["error_metrics"], "timing": metrics["timing_metrics"]}


def run_experiment(config: ExperimentConfiguration, command: str) -> int:
    """Run every configured seed and return the CLI exit code"""
    experiment_logger = get_experiment_logger()
    config.output_dir.mkdir(parents=True, exist_ok=True)
    experiment_logger.info(ComponentType.SYSTEM, f"🚀 {command}: {json.dumps(config.get_config_summary())}")

    tasks = [RunTask(seed=seed, command=command, payload={"config": config.config, "seed": seed, "command": command})
             for seed in config.seeds]
    manager = RunManager(config.config["run"]["max_parallel_runs"])
    tasks = manager.run(tasks, run_seed)

    for task in tasks:
        if task.error is not None:
            print(f"❌ seed {task.seed}: {diagnostic(task.error)}")
    failure = manager.first_failure(tasks)
    exit_code = exit_code_for(failure.error) if failure else 0
    results = [task.result for task in tasks if task.result is not None]
    for result in results:
        if result.get("reference"):
            print(result["reference"])
    if results:
        write_summaries(config, command, results)
    if exit_code == 0:
        print(f"✅ {command} finished for {len(results)} seed(s), outputs in {config.output_dir}")

    summary = run_summary(manager, experiment_logger)
    experiment_logger.info(ComponentType.SYSTEM,
                           f"📊 {command}: {summary['runs']['completed_runs']} run(s) completed, "
                           f"{summary['runs']['failed_runs']} failed, {summary['errors']['total_errors']} error(s) logged",
                           metadata=summary)
    return exit_code


def diagnostic(error: BaseException) -> str:
    if isinstance(error, LabError):
        return error.diagnostic()
    return f"error: {' '.join(str(error).split()) or type(error).__name__}"


def exit_code_for(error: BaseException) -> int:
    return error.exit_code if isinstance(error, LabError) else 1


def selftest() -> int:
    import pytest

    return int(pytest.main(["-q", "-m", "not slow", str(Path(__file__).resolve().parent)]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CQural hybrid classical-quantum continual-learning lab")
    parser.add_argument("command", choices=SUBCOMMANDS, help="What to run")
    parser.add_argument("--config", default=None, help="JSON configuration file path")
    parser.add_argument("--seed", type=int, default=None, help="Run this seed only (overrides run.seeds)")
    parser.add_argument("--out", default=None, help="Experiment output directory")
    parser.add_argument("--model", default=None, help=f"Model to train ({', '.join(MODELS)})")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI interface"""
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return selftest()

    try:
        config = ExperimentConfiguration(args.config)
        if args.seed is not None:
            config.set_seeds([args.seed])
        if args.out is not None:
            config.set_output_dir(args.out)
        if args.model is not None:
            config.set_model(args.model)
        return run_experiment(config, args.command)
    except LabError as e:
        print(f"❌ {e.diagnostic()}")
        return e.exit_code
    except Exception as e:
        print(f"❌ {diagnostic(e)}")
        return 1
    finally:
        get_experiment_logger().stop()


if __name__ == "__main__":
    sys.exit(main())
