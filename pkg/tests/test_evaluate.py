import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cshift.errors import ConfigError
from cshift.evaluate import (METRIC_COLUMNS, MetricRow, candidate_variance,
                             consensus_variance_curve, csv_text, edge_improvement_report,
                             emit_reports, l1_x100_arrays, match_histogram, median_bandwidth,
                             mmd2_unbiased, read_metric_rows, write_csv, metric_rows_csv)


def test_l1_x100():
    assert l1_x100_arrays(np.zeros((2, 2, 1)), np.full((2, 2, 1), 0.25)) == pytest.approx(25.0)


def test_metric_row_validation():
    with pytest.raises(ValueError):
        MetricRow(1, "depth", "cshift", float("nan"))
    with pytest.raises(ValueError):
        MetricRow(1, "depth", "cshift", -1.0)


def test_mmd_hand_example():
    x = np.array([[0.0], [0.0]])
    y = np.array([[1.0], [1.0]])
    expected = 1 + 1 - 2 * math.exp(-0.5)
    assert abs(mmd2_unbiased(x, y, bandwidth=1.0) - expected) < 1e-12
    assert abs(expected - 0.7869) < 1e-4


@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 4)),
              elements=st.floats(-3, 3)))
def test_mmd_identical_sets_zero(x):
    assert mmd2_unbiased(x, x.copy()) == 0.0


def test_mmd_errors_and_bandwidth():
    with pytest.raises(ConfigError):
        mmd2_unbiased(np.zeros((1, 2)), np.zeros((3, 2)))
    with pytest.raises(Exception):
        mmd2_unbiased(np.zeros((3, 2)), np.zeros((3, 3)))
    assert median_bandwidth(np.zeros((3, 2)), np.zeros((3, 2))) == 1.0


def test_mmd_separates_clouds():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
        far = rng.normal(size=(30, 3)) + 1.5
        wins += mmd2_unbiased(a, far) > mmd2_unbiased(a, b)
    assert wins >= 19


def test_histogram_identity_within_bin():
    rng = np.random.default_rng(0)
    src = rng.random((64, 64))
    out = match_histogram(src, src.copy(), bins=256)
    assert np.max(np.abs(out - src)) <= 1 / 256 + 1e-12


def test_histogram_constant_source():
    ref = np.linspace(0, 1, 101)
    out = match_histogram(np.full((4, 4), 0.3), ref)
    assert np.ptp(out) == 0
    assert abs(out[0, 0] - np.median(ref)) <= 1 / 256


def test_histogram_constant_reference():
    rng = np.random.default_rng(1)
    assert np.all(match_histogram(rng.random((8, 8)), np.full(10, 0.7)) == 0.7)


@given(st.integers(0, 2 ** 31 - 1))
def test_histogram_properties(seed):
    rng = np.random.default_rng(seed)
    src = rng.random((64, 64)) ** 2
    ref = rng.beta(2, 5, size=(64, 64))
    out = match_histogram(src, ref, bins=256)
    assert out.min() >= ref.min() and out.max() <= ref.max()
    order = np.argsort(src.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= -1e-12)
    grid = np.linspace(0, 1, 257)
    f_out = np.searchsorted(np.sort(out.ravel()), grid, side="right") / out.size
    f_ref = np.searchsorted(np.sort(ref.ravel()), grid, side="right") / ref.size
    assert np.max(np.abs(f_out - f_ref)) < 2 / 256


def test_edge_improvement_report():
    a = {("rgb", "depth"): 10.0, ("seg", "depth"): 4.0}
    b = {("rgb", "depth"): 9.0, ("seg", "depth"): 5.0}
    rows = edge_improvement_report(a, b)
    assert rows == [("rgb", "depth", pytest.approx(10.0)), ("seg", "depth", pytest.approx(-25.0))]
    assert all(r[2] == 0 for r in edge_improvement_report(a, dict(a)))
    with pytest.raises(ConfigError):
        edge_improvement_report(a, {("rgb", "depth"): 1.0})


def test_variance_of_two_constants():
    stack = np.stack([np.zeros((3, 3, 1)), np.ones((3, 3, 1))])
    assert candidate_variance(stack) == 0.25
    curve = consensus_variance_curve({("a", "d"): [stack[0], stack[0]],
                                      ("b", "d"): [stack[1], stack[0]],
                                      ("a", "e"): [stack[0], stack[1]]})
    assert curve == [0.25, 0.0]


def test_csv_format_and_round_trip(tmp_path):
    rows = [MetricRow(1, "depth", "cshift", 1 / 3)]
    text = csv_text(METRIC_COLUMNS, metric_rows_csv(rows))
    assert text == "iteration,task,method,l1_x100\n1,depth,cshift,0.333333\n"
    write_csv(tmp_path / "m.csv", METRIC_COLUMNS, metric_rows_csv(rows))
    assert read_metric_rows(tmp_path / "m.csv")[0].value == pytest.approx(1 / 3, abs=1e-6)


def test_emit_reports(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert emit_reports(empty) == []
    assert (empty / "metrics.csv").read_text() == "iteration,task,method,l1_x100\n"
    assert not list(empty.glob("*.svg"))
    run = tmp_path / "run"
    for k, v in ((1, 5.0), (2, 4.0)):
        d = run / f"iter{k}"
        d.mkdir(parents=True)
        write_csv(d / "metrics.csv", METRIC_COLUMNS,
                  [(k, "depth", "cshift", v), (k, "depth", "expert", 6.0)])
        write_csv(d / "variance.csv", ("epoch", "variance"), [(1, 0.2), (2, 0.1)])
    rows = emit_reports(run)
    assert [(r.iteration, r.method) for r in rows] == [(1, "expert"), (1, "cshift"),
                                                        (2, "expert"), (2, "cshift")]
    for name in ("cshift_l1.svg", "methods.svg", "variance.svg"):
        assert (run / name).read_text().startswith("<svg")
