"""Metrics, curves and the CSV, SVG and PPM emitters"""

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lab_errors import DataError, DimensionError, ParameterError, UsageError
from report_writer import (
    MetricsRow, classification_report, compute_metrics, emit_csv, emit_ppm_overlay, emit_svg_plot, fixed,
    format_cell, percent, pr_points, read_csv, reference_comparison, roc_points, write_atomic, write_csv,
)

SVG_NS = "{http://www.w3.org/2000/svg}"


def confusion_fixture():
    """Truth/prediction pairs for the matrix [[3, 1], [2, 4]]"""
    truths = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    predictions = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1]
    return predictions, truths


class TestMetrics:
    def test_confusion_fixture(self):
        metrics = compute_metrics(*confusion_fixture())
        np.testing.assert_array_equal(metrics.confusion, [[3, 1], [2, 4]])
        assert metrics.accuracy == pytest.approx(0.7)
        assert metrics.precision == pytest.approx((0.6, 0.8))
        assert metrics.recall == pytest.approx((0.75, 4 / 6))
        assert metrics.total == 10
        assert metrics.support(1) == 6

    def test_perfect_predictions(self):
        metrics = compute_metrics([0, 1, 1], [0, 1, 1])
        assert metrics.accuracy == 1.0
        assert metrics.f1(0) == 1.0

    def test_missing_class_gives_zero_precision(self):
        metrics = compute_metrics([0, 0], [0, 1])
        assert metrics.precision[1] == 0.0
        assert metrics.f1(1) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            compute_metrics([0, 1], [0])
        with pytest.raises(UsageError):
            compute_metrics([], [])

    def test_report_text(self):
        text = classification_report(compute_metrics(*confusion_fixture()), ("cat", "dog"))
        lines = text.splitlines()
        assert lines[0].split() == ["class", "precision", "recall", "f1", "support"]
        assert lines[1].split()[0] == "cat"
        assert lines[-1].split()[-1] == "10"


class TestCurves:
    def test_perfect_ranking(self):
        curve = roc_points([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert curve.area == pytest.approx(1.0)
        assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)

    def test_random_scores(self):
        rng = np.random.default_rng(0)
        curve = roc_points(rng.random(2000), rng.integers(0, 2, 2000))
        assert abs(curve.area - 0.5) < 0.05

    def test_ties_share_a_threshold(self):
        curve = roc_points([0.5, 0.5, 0.5], [1, 0, 1])
        assert len(curve.thresholds) == 3
        assert curve.area == pytest.approx(0.5)

    def test_inverse_ranking(self):
        assert roc_points([0.1, 0.9], [1, 0]).area == pytest.approx(0.0)

    def test_precision_recall(self):
        curve = pr_points([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert curve.points[0] == (0.0, 1.0)
        assert curve.area == pytest.approx(1.0)
        assert curve.points[-1] == (1.0, 0.5)

    def test_single_class_truths(self):
        with pytest.raises(UsageError):
            roc_points([0.1, 0.2], [1, 1])


class TestCsv:
    def test_quoting(self):
        data = emit_csv(["name", "note"], [["plain", 'says "hi", twice']])
        assert data == b'name,note\r\nplain,"says ""hi"", twice"\r\n'

    def test_header_only(self):
        assert emit_csv(["a", "b"], []) == b"a,b\r\n"

    def test_read_back(self):
        rows = [[1, 0.25, "x,y"], [2, None, True]]
        header, body = read_csv(emit_csv(["n", "v", "s"], rows))
        assert header == ["n", "v", "s"]
        assert body == [["1", "0.25", "x,y"], ["2", "", "1"]]

    def test_ragged_row(self):
        with pytest.raises(UsageError):
            emit_csv(["a", "b"], [[1]])

    def test_empty_stream(self):
        with pytest.raises(DataError):
            read_csv(b"")

    def test_cell_formats(self):
        assert format_cell(np.float64(0.1)) == "0.1"
        assert format_cell(np.bool_(False)) == "0"
        assert percent(0.705) == "70.5000"
        assert percent(None) == ""
        assert fixed(float("nan")) == ""
        assert fixed(0.12346) == "0.1235"

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        target = write_csv(tmp_path / "nested" / "table.csv", ["a"], [[1]])
        assert target.read_bytes() == b"a\r\n1\r\n"
        write_atomic(target, "replaced")
        assert target.read_text() == "replaced"
        assert [p.name for p in target.parent.iterdir()] == ["table.csv"]


class TestSvg:
    def test_two_series(self):
        svg = emit_svg_plot({"cqural": ([1, 2, 3], [0.7, 0.6, 0.65]), "cnn": ([1, 2, 3], [0.6, 0.4, 0.3])},
                            title="loss <per epoch>")
        root = ET.fromstring(svg)
        assert root.tag == f"{SVG_NS}svg"
        assert len(root.findall(f"{SVG_NS}polyline")) == 2
        assert any(text.text == "loss <per epoch>" for text in root.iter(f"{SVG_NS}text"))

    def test_points_stay_inside_canvas(self):
        svg = emit_svg_plot({"only": ([0, 10], [5, -5])}, width=300, height=200)
        polyline = ET.fromstring(svg).find(f"{SVG_NS}polyline")
        for pair in polyline.get("points").split():
            x, y = map(float, pair.split(","))
            assert 0 <= x <= 300 and 0 <= y <= 200

    def test_single_point_gets_a_marker(self):
        root = ET.fromstring(emit_svg_plot({"one": ([1], [0.5])}))
        assert len(root.findall(f"{SVG_NS}circle")) == 1

    def test_nan_rejected(self):
        with pytest.raises(DataError):
            emit_svg_plot({"bad": ([1, 2], [0.1, math.nan])})

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            emit_svg_plot({})


class TestPpm:
    def test_header_and_size(self):
        data = emit_ppm_overlay(np.zeros((1, 4, 6)), np.zeros((4, 6)))
        header = b"P6\n6 4\n255\n"
        assert data.startswith(header)
        assert len(data) == len(header) + 4 * 6 * 3

    def test_zero_alpha_is_grayscale(self):
        image = np.full((3, 2, 2), 100.0)
        body = emit_ppm_overlay(image, np.ones((2, 2)), alpha=0.0)[len(b"P6\n2 2\n255\n"):]
        assert set(body) == {100}

    def test_full_alpha_full_saliency_is_heat(self):
        body = emit_ppm_overlay(np.full((1, 2, 2), 30.0), np.ones((2, 2)), alpha=1.0)[len(b"P6\n2 2\n255\n"):]
        pixels = np.frombuffer(body, dtype=np.uint8).reshape(2, 2, 3)
        assert np.all(pixels == [255, 255, 0])

    def test_standardized_image_is_rescaled(self):
        image = np.array([[[-1.0, 1.0]]])
        body = emit_ppm_overlay(image, np.zeros((1, 2)), alpha=0.5)[len(b"P6\n2 1\n255\n"):]
        assert body == bytes([0, 0, 0, 255, 255, 255])

    def test_alpha_range(self):
        with pytest.raises(ParameterError):
            emit_ppm_overlay(np.zeros((1, 2, 2)), np.zeros((2, 2)), alpha=1.5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            emit_ppm_overlay(np.zeros((1, 2, 2)), np.zeros((3, 3)))


class TestReferenceComparison:
    def test_known_pair(self):
        row = MetricsRow(accuracy=0.8, precision=(0.5, 0.5), recall=(0.4, 0.6),
                         confusion=np.array([[2, 3], [1, 4]]), loss=0.5, epoch=5)
        text = reference_comparison("mnist", "cnn", [row])
        assert text.splitlines()[1].startswith("    5 | 0.5000 80.0 0.50 0.40")

    def test_unknown_pair(self):
        assert reference_comparison("synthetic", "cqural", []) is None
