#!/usr/bin/env python3
"""
Metrics and file emission for CQural experiments
Confusion-matrix metrics, ROC and precision-recall curves, CSV tables,
SVG loss curves and PPM saliency overlays, all written atomically
"""

import csv
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np

from lab_errors import DataError, DimensionError, ParameterError, UsageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsRow:
    accuracy: float
    precision: Tuple[float, float]
    recall: Tuple[float, float]
    confusion: np.ndarray
    loss: Optional[float] = None
    epoch: Optional[int] = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def f1(self, label: int) -> float:
        p, r = self.precision[label], self.recall[label]
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def support(self, label: int) -> int:
        return int(self.confusion[label].sum())


def compute_metrics(predictions: Sequence[int], truths: Sequence[int],
                    scores: Optional[Sequence[float]] = None) -> MetricsRow:
    """Accuracy, per-class precision and recall and the 2×2 confusion matrix (rows = truth)"""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise UsageError(f"{len(predictions)} predictions for {len(truths)} truths")
    if scores is not None and len(scores) != len(truths):
        raise UsageError(f"{len(scores)} scores for {len(truths)} truths")
    if truths.size == 0:
        raise UsageError("compute_metrics needs at least one prediction")

    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (truths, predictions), 1)
    predicted_totals = confusion.sum(axis=0)
    true_totals = confusion.sum(axis=1)
    precision = tuple(float(confusion[c, c] / predicted_totals[c]) if predicted_totals[c] else 0.0 for c in (0, 1))
    recall = tuple(float(confusion[c, c] / true_totals[c]) if true_totals[c] else 0.0 for c in (0, 1))
    return MetricsRow(accuracy=float(np.trace(confusion) / confusion.sum()),
                      precision=precision, recall=recall, confusion=confusion)


@dataclass
class Curve:
    points: List[Tuple[float, float]]
    thresholds: List[float]
    area: float


def _ranked(scores: Sequence[float], truths: Sequence[int]):
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.shape != truths.shape or scores.size == 0:
        raise UsageError(f"need equal, non-empty score and truth lists, got {scores.shape} and {truths.shape}")
    positives = int((truths == 1).sum())
    negatives = int((truths == 0).sum())
    if positives == 0 or negatives == 0:
        raise UsageError("curves need both classes present in the truths")
    thresholds = np.unique(scores)[::-1]
    tp = np.array([int(((scores >= t) & (truths == 1)).sum()) for t in thresholds])
    fp = np.array([int(((scores >= t) & (truths == 0)).sum()) for t in thresholds])
    return thresholds, tp, fp, positives, negatives


def roc_points(scores: Sequence[float], truths: Sequence[int]) -> Curve:
    """(FPR, TPR) over distinct score thresholds with ±∞ sentinels, plus trapezoidal AUC"""
    thresholds, tp, fp, positives, negatives = _ranked(scores, truths)
    fpr = np.concatenate([[0.0], fp / negatives, [1.0]])
    tpr = np.concatenate([[0.0], tp / positives, [1.0]])
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(points=list(zip(fpr.tolist(), tpr.tolist())),
                 thresholds=[math.inf] + thresholds.tolist() + [-math.inf], area=area)


def pr_points(scores: Sequence[float], truths: Sequence[int]) -> Curve:
    """(recall, precision) over distinct thresholds starting at (0, 1); area is average precision"""
    thresholds, tp, fp, positives, _ = _ranked(scores, truths)
    recall = np.concatenate([[0.0], tp / positives])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    area = float(np.sum((recall[1:] - recall[:-1]) * precision[1:]))
    return Curve(points=list(zip(recall.tolist(), precision.tolist())),
                 thresholds=[math.inf] + thresholds.tolist(), area=area)


def classification_report(metrics: MetricsRow, class_names: Sequence[str] = ("0", "1")) -> str:
    lines = [f"{'class':>12} {'precision':>10} {'recall':>10} {'f1':>10} {'support':>8}"]
    for label, name in enumerate(class_names):
        lines.append(f"{name:>12} {metrics.precision[label]:>10.4f} {metrics.recall[label]:>10.4f} "
                     f"{metrics.f1(label):>10.4f} {metrics.support(label):>8d}")
    lines.append(f"{'accuracy':>12} {'':>10} {'':>10} {metrics.accuracy:>10.4f} {metrics.total:>8d}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- CSV

def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def percent(value: Optional[float]) -> str:
    return "" if value is None else f"{100.0 * value:.4f}"


def fixed(value: Optional[float]) -> str:
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.4f}"


def emit_csv(columns: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    """Header plus rows with RFC-4180 quoting and CRLF line ends"""
    buffer = io.StringIO(newline="")
    writer = csv.writer(buffer, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(list(columns))
    for number, row in enumerate(rows):
        if len(row) != len(columns):
            raise UsageError(f"row {number} has {len(row)} cells, header has {len(columns)}")
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue().encode("utf-8")


def read_csv(data: bytes) -> Tuple[List[str], List[List[str]]]:
    reader = csv.reader(io.StringIO(data.decode("utf-8"), newline=""))
    rows = list(reader)
    if not rows:
        raise DataError("empty CSV stream")
    return rows[0], rows[1:]


# ---------------------------------------------------------------- SVG

SERIES_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _padded_range(values: np.ndarray) -> Tuple[float, float]:
    low, high = float(values.min()), float(values.max())
    if high == low:
        pad = abs(low) * 0.05 or 0.5
        return low - pad, high + pad
    pad = (high - low) * 0.05
    return low - pad, high + pad


def emit_svg_plot(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], width: int = 640,
                  height: int = 400, title: str = "", x_label: str = "epoch", y_label: str = "loss") -> bytes:
    """One polyline per series over a shared data range with 5% margins; single points become centered markers"""
    if not series:
        raise DataError("emit_svg_plot needs at least one series")
    arrays = {}
    for name, (xs, ys) in series.items():
        xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
        if xs.size == 0 or xs.shape != ys.shape:
            raise DataError(f"series '{name}' must hold equal, non-empty x and y lists")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise DataError(f"series '{name}' contains NaN or infinite values")
        arrays[name] = (xs, ys)

    left, right, top, bottom = 60, 140, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    x_lo, x_hi = _padded_range(np.concatenate([xs for xs, _ in arrays.values()]))
    y_lo, y_hi = _padded_range(np.concatenate([ys for _, ys in arrays.values()]))

    def sx(x):
        return left + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return top + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="14" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {top + plot_h / 2:.1f})">{escape(y_label)}</text>',
    ]
    for value, anchor in ((y_lo, "end"), (y_hi, "end")):
        parts.append(f'<text x="{left - 6}" y="{sy(value) + 4:.1f}" text-anchor="{anchor}" font-size="10">{value:.4g}</text>')
    for value in (x_lo, x_hi):
        parts.append(f'<text x="{sx(value):.1f}" y="{top + plot_h + 16}" text-anchor="middle" font-size="10">{value:.4g}</text>')

    for index, (name, (xs, ys)) in enumerate(arrays.items()):
        colour = SERIES_COLOURS[index % len(SERIES_COLOURS)]
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{points}"/>')
        if xs.size == 1:
            parts.append(f'<circle cx="{sx(xs[0]):.2f}" cy="{sy(ys[0]):.2f}" r="3" fill="{colour}"/>')
        legend_y = top + 16 * index + 8
        parts.append(f'<line x1="{left + plot_w + 12}" y1="{legend_y}" x2="{left + plot_w + 32}" y2="{legend_y}" '
                     f'stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w + 36}" y="{legend_y + 4}" font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8")


# ---------------------------------------------------------------- PPM

def grayscale(image: np.ndarray) -> np.ndarray:
    """Channel mean; values outside [0, 255] are min-max rescaled onto it"""
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0) if image.ndim == 3 else image
    low, high = float(gray.min()), float(gray.max())
    if low < 0.0 or high > 255.0:
        gray = (gray - low) / (high - low) * 255.0 if high > low else np.zeros_like(gray)
    return gray


def heat(saliency: np.ndarray) -> np.ndarray:
    """Red-yellow ramp: (255, 255·s, 0)"""
    s = np.asarray(saliency, dtype=np.float64)
    return np.stack([np.full_like(s, 255.0), 255.0 * s, np.zeros_like(s)], axis=-1)


def emit_ppm_overlay(image: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> bytes:
    """Binary P6 of (1 - alpha·s)·gray + alpha·s·heat(s)"""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"overlay alpha must lie in [0, 1], got {alpha}")
    gray = grayscale(image)
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != gray.shape:
        raise DimensionError(f"saliency {saliency.shape} does not match image {gray.shape}")
    weight = (alpha * np.clip(saliency, 0.0, 1.0))[..., None]
    pixels = (1.0 - weight) * gray[..., None] + weight * heat(np.clip(saliency, 0.0, 1.0))
    height, width = gray.shape
    body = np.clip(np.rint(pixels), 0, 255).astype(np.uint8).tobytes()
    return f"P6\n{width} {height}\n255\n".encode("ascii") + body


# ---------------------------------------------------------------- files

def write_atomic(path: PathLike, data: Union[bytes, str]) -> Path:
    """Write to a sibling temp file then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(handle, "wb") as temp:
            temp.write(data)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    logger.debug(f"wrote {path} ({len(data)} bytes)")
    return path


def write_csv(path: PathLike, columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    return write_atomic(path, emit_csv(columns, rows))


# Published desk-scale results, printed next to real-dataset runs for comparison only
REFERENCE_RESULTS = {
    ("cifar10", "cnn"): [(5, 0.5492, 72.0, 0.60, 0.37), (10, 0.6155, 72.0, 0.54, 0.37), (15, 0.3648, 82.5, 0.50, 0.54),
                         (20, 0.3869, 84.0, 0.53, 0.50), (25, 0.4154, 81.0, 0.48, 0.44)],
    ("cifar10", "cqural"): [(5, 0.6330, 70.5, 0.54, 0.37), (10, 0.5258, 51.5, 0.45, 0.45), (15, 0.7460, 80.5, 0.54, 0.64),
                            (20, 0.8204, 82.5, 0.51, 0.64), (25, 0.8410, 84.0, 0.51, 0.64)],
    ("mnist", "cnn"): [(5, 0.161, 99.5, 0.56, 0.55), (10, 0.1595, 100.0, 0.52, 0.52), (15, 0.1567, 100.0, 0.44, 0.44),
                       (20, 0.1605, 100.0, 0.55, 0.55), (25, 0.1609, 99.5, 0.45, 0.45)],
    ("mnist", "cqural"): [(5, 0.7353, 71.0, 0.50, 0.79), (10, 0.7361, 73.0, 0.49, 0.78), (15, 0.7337, 72.5, 0.51, 0.76),
                          (20, 0.7343, 73.5, 0.52, 0.81), (25, 0.7438, 75.0, 0.50, 0.77)],
}


def reference_comparison(dataset: str, model: str, rows: Sequence[MetricsRow]) -> Optional[str]:
    """Side-by-side text of measured checkpoint rows and the published ones, class-0 precision/recall"""
    reference = REFERENCE_RESULTS.get((dataset, model))
    if reference is None:
        return None
    measured = {row.epoch: row for row in rows}
    lines = [f"{dataset}/{model}: epoch | measured loss acc% P0 R0 | reference loss acc% P0 R0"]
    for epoch, loss, acc, precision, recall in reference:
        row = measured.get(epoch)
        ours = (f"{row.loss:.4f} {100 * row.accuracy:.1f} {row.precision[0]:.2f} {row.recall[0]:.2f}"
                if row is not None else "-")
        lines.append(f"{epoch:>5} | {ours} | {loss:.4f} {acc:.1f} {precision:.2f} {recall:.2f}")
    return "\n".join(lines)
