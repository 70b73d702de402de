import os

import pytest

from tools.estimators.records import CLOGOR, MRD, EstimateRecord
from tools.report.report_builder import build_report, coverage_band
from tools.report.template_manager import TemplateManager, format_number
from tools.truth.metrics import summarize, write_summaries
from tools.truth.truth_engine import TruthValue


@pytest.fixture
def summary_file(tmp_path):
    rows = []
    for estimand, truth in ((MRD, 0.04), (CLOGOR, 0.405)):
        value = TruthValue("X1/Y1.1/M1.1", estimand, "oracle", truth, 0, 0.0)
        for estimator, shift in (("CC", 0.02), ("IPW", 0.0), ("GR", -0.005)):
            records = [EstimateRecord.from_point(estimator, estimand, truth + shift + 0.01 * k, 0.02, k,
                                                 "X1/Y1.1/M1.1") for k in range(-2, 3)]
            rows.append(summarize(records, value))
    path = str(tmp_path / "summary_X1_Y1.1_M1.1.csv")
    write_summaries(rows, path)
    return path


def test_coverage_band():
    assert coverage_band(2500) == pytest.approx(0.00854, abs=1e-5)
    assert coverage_band(1000) == pytest.approx(0.01351, abs=1e-5)
    with pytest.raises(ValueError):
        coverage_band(0)


def test_format_number():
    assert format_number(None) == "-"
    assert format_number(0.12345) == "0.123"
    assert format_number(2, digits=1) == "2.0"


def test_report_from_summaries(summary_file, tmp_path):
    out_dir = str(tmp_path / "report")
    result = build_report([summary_file], out_dir)
    assert result.sections == 2
    assert len(result.panels) == 6
    for panel in result.panels:
        assert panel.endswith(".svg") and os.path.exists(panel)
    with open(result.text_path, encoding="utf-8") as f:
        text = f.read()
    assert "X1/Y1.1/M1.1" in text
    assert "IPW" in text and "GR" in text
    assert os.path.exists(result.html_path)


def test_report_is_reproducible(summary_file, tmp_path):
    first = build_report([summary_file], str(tmp_path / "a"))
    second = build_report([summary_file], str(tmp_path / "b"))
    for a, b in zip(first.panels, second.panels):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()


def test_empty_report_still_written(tmp_path):
    result = build_report([], str(tmp_path))
    assert result.sections == 0 and result.panels == ()
    assert os.path.exists(result.text_path)


def test_template_configs_loaded():
    manager = TemplateManager()
    assert "bias" in manager.get_panels("summary")
