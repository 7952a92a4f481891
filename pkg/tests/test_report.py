import dataclasses
import json

import pytest

from lntune.config import load_experiment
from lntune.errors import ComparabilityError, ConfigError, MissingDataError
from lntune.report import (
    GAP,
    build_report,
    fmt,
    param_table,
    unified_labels,
    unified_methods,
)
from lntune.runner import ResultsStore, run_experiment


@pytest.fixture
def results(tiny_config):
    cfgs = [load_experiment(tiny_config(m)) for m in ("full", "ln", "bitfit")]
    return [run_experiment(c) for c in cfgs], ResultsStore(cfgs[0].output_dir)


def test_fmt():
    assert fmt(None) == GAP
    assert fmt(0.123456) == "0.1235"
    assert fmt(36864) == "36864"
    assert fmt(1e-7) == "1e-07"


def test_empty_results_are_an_error(tmp_path):
    for kind in ("param_table", "unified_matrix", "ablation_matrix", "time_chart"):
        with pytest.raises(MissingDataError):
            build_report(kind, [], ResultsStore(tmp_path))
    assert not any(tmp_path.iterdir())


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_report("pie_chart", [])


def test_unified_matrix_marks_gaps(results):
    rs, _ = results
    report = build_report("unified_matrix", rs)
    assert [r[0] for r in report.rows] == unified_labels()
    assert "bitfit" not in report.gaps and len(report.gaps) == 11
    bitfit = next(r for r in report.rows if r[0] == "bitfit")
    assert bitfit[1] == rs[2].accounting["trainable"]
    missing = next(r for r in report.rows if r[0] == "mam")
    assert report.csv().count(GAP) == 11 * (len(report.columns) - 1)
    assert missing[1:] == [None] * (len(report.columns) - 1)


def test_unified_methods_match_labels():
    assert [m.name for m in unified_methods(8, 8)] == unified_labels()


def test_ablation_matrix_rows(results):
    rs, _ = results
    report = build_report("ablation_matrix", rs)
    assert [r[0] for r in report.rows][:3] == ["ln", "ln[gain_only]", "ln[bias_only]"]
    assert report.rows[0][1] == rs[1].accounting["trainable"]


def test_time_chart_pins_full_at_100(results, tmp_path):
    rs, store = results
    report = build_report("time_chart", rs, store)
    assert report.rows[0][:3] == ["full", 100.0, 100.0]
    assert not report.gaps
    paths = report.write(tmp_path / "out")
    assert sorted(p.name for p in paths) == ["time_chart.csv", "time_chart.pairs.csv", "time_chart.txt"]
    assert (tmp_path / "out" / "time_chart.pairs.csv").read_text().splitlines()[1] == "full,100"


def test_time_chart_without_full_is_a_gap(results):
    rs, store = results
    assert build_report("time_chart", rs[1:], store).gaps == ["full"]


def test_time_chart_rejects_incomparable_timings(results):
    rs, store = results
    t = store.load_timings(rs[1].fingerprint)
    t.comparability = [[], 999, "other"]
    store.timing_path(rs[1].fingerprint).write_text(json.dumps(dataclasses.asdict(t)))
    with pytest.raises(ComparabilityError):
        build_report("time_chart", rs, store)


def test_mixed_settings_rejected(results):
    rs, _ = results
    other = dataclasses.replace(rs[1], method="ln[gain_only]", task={**rs[1].task, "train": 1})
    with pytest.raises(ComparabilityError):
        build_report("unified_matrix", [rs[0], other])


def test_duplicate_method_rejected(results):
    rs, _ = results
    with pytest.raises(ConfigError):
        build_report("unified_matrix", rs + [dataclasses.replace(rs[2], fingerprint="0" * 16)])


def test_reports_are_deterministic(results, tmp_path):
    rs, store = results
    for kind in ("param_table", "unified_matrix", "ablation_matrix"):
        a = [p.read_bytes() for p in build_report(kind, rs, store).write(tmp_path / "a")]
        b = [p.read_bytes() for p in build_report(kind, list(reversed(rs)), store).write(tmp_path / "b")]
        assert a == b


def test_param_table_closed_form():
    report = param_table("bert-base-shape")
    ln = next(r for r in report.rows if r[0] == "ln")
    assert ln[1] == 36_864
    assert ln[6] == pytest.approx(0.0433, abs=5e-4)
    desk = param_table("desk-base")
    assert [r[0].split(" ")[0] for r in desk.rows][:3] == ["full", "ln", "bitfit"]
