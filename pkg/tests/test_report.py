"""File renderers: text tables, JSON records, SVG figures, provenance.

The central claim under test is determinism: writing the same report twice
must produce byte-identical files, SVG figures included. Content checks
stay coarse for the figures (valid SVG, the right text fragments) because
the drawing itself is matplotlib's business, not ours.
"""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from aggnet.evaluate import confusion, report_from_matrix, aggregate_runs
from aggnet.report import (
    config_digest,
    confusion_text,
    metrics_to_dict,
    write_confusion_svg,
    write_confusion_text,
    write_gsd_curve_svg,
    write_history_svg,
    write_metrics_json,
    write_run_json,
)
from aggnet.train import EpochStats


def _report():
    cm = confusion([1, 1, 2, 2, 2, 1], [1, 1, 2, 2, 1, 2], 2)
    return report_from_matrix(cm, class_names=("fine", "coarse"))


def _two_run_report():
    a = report_from_matrix(confusion([1, 2], [1, 2], 2))
    b = report_from_matrix(confusion([1, 1], [1, 2], 2))
    return aggregate_runs([a, b])


def _history():
    return [
        EpochStats(epoch=0, train_loss=1.09, val_loss=1.11, val_oa=33.3, lr=1e-3),
        EpochStats(epoch=1, train_loss=0.71, val_loss=0.84, val_oa=58.0, lr=1e-3),
        EpochStats(epoch=2, train_loss=0.43, val_loss=0.61, val_oa=81.5, lr=1e-4),
    ]


class TestMetricsDict:
    def test_fields_round_trip_through_json(self, tmp_path):
        rep = _report()
        out = tmp_path / "metrics.json"
        write_metrics_json(out, rep)
        data = json.loads(out.read_text())
        assert data["classes"] == ["fine", "coarse"]
        assert data["runs"] == 1
        assert data["oa_percent"] == pytest.approx(rep.oa)
        assert data["confusion_counts"] == [[2, 1], [1, 2]]
        assert data["quality_percent"][0]["class"] == "fine"
        assert data["quality_percent"][0]["undefined"] is False

    def test_row_percent_matches_matrix(self):
        rep = _report()
        d = metrics_to_dict(rep)
        assert np.allclose(d["confusion_row_percent"],
                           rep.matrix.row_normalized())

    def test_sigma_carried_for_multi_run(self):
        d = metrics_to_dict(_two_run_report())
        assert d["runs"] == 2
        assert d["sigma_defined"] is True
        assert d["run_oas_percent"] == [100.0, 50.0]

    def test_json_is_byte_identical_on_rerun(self, tmp_path):
        rep = _report()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_metrics_json(a, rep)
        write_metrics_json(b, rep)
        assert a.read_bytes() == b.read_bytes()


class TestConfusionText:
    def test_percentages_use_one_decimal(self):
        text = confusion_text(_report())
        # 2 of 3 reference "fine" predicted "fine": 66.7, not 66.66...
        assert "66.7" in text
        assert "66.66" not in text

    def test_header_and_classes_present(self):
        text = confusion_text(_report())
        lines = text.splitlines()
        assert "reference class" in lines[0]
        assert "fine" in lines[1] and "coarse" in lines[1]
        assert lines[2].startswith("fine")
        assert lines[3].startswith("coarse")

    def test_single_run_omits_sigma(self):
        text = confusion_text(_report())
        assert "sigma" not in text
        assert "OA 66.7 %" in text

    def test_multi_run_reports_sigma_and_count(self):
        text = confusion_text(_two_run_report())
        assert "sigma 35.4" in text
        assert "2 runs" in text

    def test_undefined_quality_prints_na(self):
        # Class 2 never occurs in reference or prediction.
        cm = confusion([1, 1], [1, 1], 2)
        text = confusion_text(report_from_matrix(cm))
        assert "n/a" in text

    def test_writer_matches_formatter(self, tmp_path):
        rep = _report()
        out = tmp_path / "confusion.txt"
        write_confusion_text(out, rep)
        assert out.read_text() == confusion_text(rep)


def _assert_valid_svg(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    return path.read_bytes()


class TestFigures:
    def test_confusion_svg_parses_and_is_deterministic(self, tmp_path):
        rep = _report()
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        write_confusion_svg(a, rep)
        write_confusion_svg(b, rep)
        assert _assert_valid_svg(a) == _assert_valid_svg(b)

    def test_confusion_svg_has_no_date_metadata(self, tmp_path):
        out = tmp_path / "confusion.svg"
        write_confusion_svg(out, _report())
        assert b"dc:date" not in out.read_bytes()

    def test_history_svg_parses_and_is_deterministic(self, tmp_path):
        hist = _history()
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        write_history_svg(a, hist)
        write_history_svg(b, hist)
        assert _assert_valid_svg(a) == _assert_valid_svg(b)

    def test_gsd_curve_svg_parses_and_is_deterministic(self, tmp_path):
        rows = [(1.0, 72.0, 3.0, 5), (2.0, 91.0, 1.5, 5), (4.0, 88.0, 2.0, 5)]
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        write_gsd_curve_svg(a, rows)
        write_gsd_curve_svg(b, rows)
        assert _assert_valid_svg(a) == _assert_valid_svg(b)

    def test_gsd_curve_skips_failed_rows(self, tmp_path):
        # A row with zero successful runs must not crash the plot.
        rows = [(1.0, 0.0, 0.0, 0), (2.0, 91.0, 1.5, 5)]
        out = tmp_path / "curve.svg"
        write_gsd_curve_svg(out, rows)
        _assert_valid_svg(out)


class TestDigest:
    def test_bytes_hash_matches_sha256(self):
        import hashlib

        blob = b"[model]\nvariant = 'MS'\n"
        assert config_digest(blob) == hashlib.sha256(blob).hexdigest()

    def test_dict_digest_ignores_key_order(self):
        assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})

    def test_dict_digest_sensitive_to_values(self):
        assert config_digest({"a": 1}) != config_digest({"a": 2})


class TestRunJson:
    def test_record_fields(self, tmp_path):
        out = tmp_path / "run.json"
        write_run_json(out, seed=7, digest="d" * 64)
        data = json.loads(out.read_text())
        assert data["seed"] == 7
        assert data["config_sha256"] == "d" * 64
        for key in ("package", "python", "numpy", "matplotlib", "opencv"):
            assert key in data["versions"]

    def test_extra_fields_merged(self, tmp_path):
        out = tmp_path / "run.json"
        write_run_json(out, seed=0, digest="x", extra={"epochs": 12})
        assert json.loads(out.read_text())["epochs"] == 12

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_run_json(a, seed=3, digest="abc")
        write_run_json(b, seed=3, digest="abc")
        assert a.read_bytes() == b.read_bytes()
