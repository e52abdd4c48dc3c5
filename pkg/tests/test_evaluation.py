from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from pectp.evaluation import (
    AccuracyMatrix,
    IncompleteMatrixError,
    OverheadReport,
    ReportError,
    RunResult,
    cumulative_average_accuracy,
    emit_report,
    final_average_accuracy,
    median_spread,
    per_session_accuracies,
    read_matrix_csv,
    selection_accuracy,
)

from .oracles import loop_cumulative_average, loop_final_average


def _random_rows(rng, b):
    return [[float(rng.uniform()) for _ in range(t)] for t in range(1, b + 1)]


def _overhead():
    return OverheadReport("PECTP", 20, 640, 0, 165, 805, 0.5, 0.01)


def test_worked_example():
    m = AccuracyMatrix.from_rows([[1.0], [0.8, 0.6]])
    assert final_average_accuracy(m) == pytest.approx(0.7, abs=1e-15)
    assert cumulative_average_accuracy(m) == pytest.approx(0.85, abs=1e-15)


def test_all_ones():
    m = AccuracyMatrix.from_rows([[1.0] * t for t in range(1, 6)])
    assert final_average_accuracy(m) == 1.0
    assert cumulative_average_accuracy(m) == 1.0


def test_single_session():
    m = AccuracyMatrix()
    m.record(1, 1, 37, 40)
    assert cumulative_average_accuracy(m) == final_average_accuracy(m) == 37 / 40


def test_metrics_match_loop_oracles_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rows = _random_rows(rng, int(rng.integers(1, 10)))
        m = AccuracyMatrix.from_rows(rows)
        assert abs(final_average_accuracy(m) - loop_final_average(rows)) <= 1e-12
        assert abs(cumulative_average_accuracy(m) - loop_cumulative_average(rows)) <= 1e-12


def test_constant_run_cumulative_equals_constant():
    for c in (0.25, 0.6, 0.9):
        m = AccuracyMatrix.from_rows([[c] * t for t in range(1, 7)])
        assert cumulative_average_accuracy(m) == pytest.approx(c, abs=1e-15)


def test_counts_are_exact_fractions():
    m = AccuracyMatrix()
    m.record(1, 1, 1, 3)
    m.record(1, 2, 1, 3)
    m.record(2, 2, 2, 3)
    assert per_session_accuracies(m) == [1 / 3, 0.5]


def test_incomplete_matrix_errors():
    m = AccuracyMatrix()
    with pytest.raises(IncompleteMatrixError):
        final_average_accuracy(m)
    m.record(1, 1, 1, 1)
    m.record(2, 2, 1, 1)
    with pytest.raises(IncompleteMatrixError):
        cumulative_average_accuracy(m)
    with pytest.raises(IncompleteMatrixError):
        m[1, 2]


def test_upper_triangle_rejected():
    with pytest.raises(ValueError):
        AccuracyMatrix().record(2, 1, 1, 1)
    with pytest.raises(ValueError):
        AccuracyMatrix().record(1, 1, 5, 4)


def test_lower_triangular_shape():
    m = AccuracyMatrix.from_rows(_random_rows(np.random.default_rng(1), 4))
    rows = m.to_rows()
    for t, row in enumerate(rows, start=1):
        assert all(v is not None for v in row[:t]) and all(v is None for v in row[t:])


# ---------------------------------------------------------------- selection accuracy


def test_selection_accuracy_examples():
    assert selection_accuracy([[1, 1, 1]], [[1, 1, 1]]) == [1.0]
    assert selection_accuracy([[1, 2, 1, 2]], [[1, 1, 1, 1]]) == [0.5]
    assert selection_accuracy([[1], [1, 2]], [[1], [2, 2]]) == [1.0, 0.5]


def test_selection_accuracy_errors():
    with pytest.raises(ValueError):
        selection_accuracy([[1]], [[1], [1]])
    with pytest.raises(ValueError):
        selection_accuracy([[1, 2]], [[1]])


def test_median_spread():
    assert median_spread([]) == (0.0, 0.0)
    med, spread = median_spread([1.0, 3.0, 2.0])
    assert med == 2.0 and spread == pytest.approx(np.std([1.0, 2.0, 3.0]))


# ---------------------------------------------------------------- reports


def _result(seed=0, selection=None):
    rows = _random_rows(np.random.default_rng(seed), 3)
    return RunResult("PECTP", seed, AccuracyMatrix.from_rows(rows), _overhead(), selection=selection)


def test_emit_report_round_trips_numbers(tmp_path):
    results = [_result(0, selection=[1.0, 0.75, 0.5]), _result(1, selection=[1.0, 0.5, 0.25])]
    written = emit_report(results, tmp_path, config={"method": {"alpha": 1.0}})
    summary = json.loads(written["summary"].read_text(encoding="utf-8"))
    assert summary["seeds"] == [0, 1]
    assert summary["config"] == {"method": {"alpha": 1.0}}
    for r, s in zip(results, summary["runs"]):
        assert s["final_average_accuracy"] == final_average_accuracy(r.matrix)
        assert s["cumulative_average_accuracy"] == cumulative_average_accuracy(r.matrix)
        assert s["per_session_accuracy"] == per_session_accuracies(r.matrix)
        assert s["selection_accuracy"] == r.selection
        assert s["overhead"]["learnable_params"] == 805
        assert AccuracyMatrix.from_counts(s["accuracy_counts"]).cells == r.matrix.cells
    timing = json.loads(written["timing"].read_text(encoding="utf-8"))
    assert timing[0]["training_time_per_epoch"] == 0.5
    assert "training_time_per_epoch" not in written["summary"].read_text(encoding="utf-8")


def test_matrix_csv_triangle_and_round_trip(tmp_path):
    r = _result(2)
    written = emit_report([r], tmp_path)
    path = written["matrix:PECTP_seed2"]
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 3
    assert [len(row) - 1 for row in rows[1:]] == [1, 2, 3]
    back = read_matrix_csv(path)
    for t in range(1, 4):
        for i in range(1, t + 1):
            assert back[i, t] == r.matrix[i, t]


def test_plot_data(tmp_path):
    written = emit_report([_result(0, selection=[1.0, 0.8, 0.6])], tmp_path)
    with written["plot_data"].open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["session"]) for r in rows] == [1, 2, 3]
    assert [float(r["selection_accuracy"]) for r in rows] == [1.0, 0.8, 0.6]


def test_empty_run_is_an_error(tmp_path):
    with pytest.raises(ReportError):
        emit_report([], tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_unwritable_path_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError, match="file"):
        emit_report([_result()], blocker / "sub")
