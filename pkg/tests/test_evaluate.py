import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gist.errors import EvalError
from gist.evaluate import (
    BootstrapConfig,
    EvalReport,
    MetricRow,
    aggregate_kshot,
    bootstrap_accuracy,
    format_cell,
    render_report,
    report_from_json,
    topk_accuracy,
    write_report_csv,
)


def _scores_with_accuracy(n, classes, accuracy, seed=0):
    """Score matrix whose argmax hits the label on exactly
    round(accuracy * n) rows."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    scores = rng.normal(size=(n, classes))
    correct = round(accuracy * n)
    order = rng.permutation(n)
    for pos, i in enumerate(order):
        scores[i] -= scores[i].max() - 0.0  # keep magnitudes tame
        if pos < correct:
            scores[i, labels[i]] = scores[i].max() + 1.0
        else:
            wrong = (labels[i] + 1) % classes
            scores[i, wrong] = scores[i].max() + 1.0
            scores[i, labels[i]] = scores[i].min() - 1.0
    return scores, labels


def test_topk_accuracy_basic():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.3, 0.5], [0.4, 0.4, 0.2]])
    labels = [0, 2, 0]  # third row ties 0 vs 1; lower index wins
    assert topk_accuracy(scores, labels, 1) == pytest.approx(1.0)
    scores2 = np.array([[0.1, 0.9, 0.0], [0.2, 0.3, 0.5]])
    assert topk_accuracy(scores2, [0, 0], 1) == pytest.approx(0.0)
    assert topk_accuracy(scores2, [0, 0], 2) == pytest.approx(0.5)


def test_topk_tie_break_prefers_lower_class_index():
    # Exact ties resolve toward the lower class index, both in and out
    # of the label's favor, so results do not depend on sort stability.
    scores = np.array([[0.5, 0.5, 0.1]])
    assert topk_accuracy(scores, [0], 1) == pytest.approx(1.0)
    assert topk_accuracy(scores, [1], 1) == pytest.approx(0.0)
    assert topk_accuracy(scores, [1], 2) == pytest.approx(1.0)


@settings(deadline=None, max_examples=30)
@given(st.integers(2, 20), st.integers(2, 6), st.integers(0, 10_000))
def test_topk_monotone_in_k(n, classes, seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(n, classes))
    labels = rng.integers(0, classes, size=n).tolist()
    accs = [topk_accuracy(scores, labels, k) for k in range(1, classes + 1)]
    assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))
    assert accs[-1] == pytest.approx(1.0)


def test_bootstrap_matches_binomial_oracle():
    scores, labels = _scores_with_accuracy(272, 5, 0.8, seed=1)
    mean, std = bootstrap_accuracy(scores, labels, BootstrapConfig(resamples=1000, seed=0))
    oracle = math.sqrt(0.8 * 0.2 / 272)
    assert abs(mean - 0.8) < 0.01
    assert abs(std - oracle) <= 0.2 * oracle


def test_bootstrap_deterministic_and_parallel_equal():
    scores, labels = _scores_with_accuracy(100, 4, 0.7, seed=2)
    cfg = BootstrapConfig(resamples=200, seed=5)
    serial = bootstrap_accuracy(scores, labels, cfg, workers=1)
    again = bootstrap_accuracy(scores, labels, cfg, workers=1)
    parallel = bootstrap_accuracy(scores, labels, cfg, workers=4)
    assert serial == again
    assert serial == parallel
    other = bootstrap_accuracy(scores, labels, BootstrapConfig(resamples=200, seed=6))
    assert serial != other


def test_aggregate_kshot():
    mean, std = aggregate_kshot([0.7, 0.8, 0.9])
    assert mean == pytest.approx(0.8)
    assert std == pytest.approx(np.std([0.7, 0.8, 0.9], ddof=1))
    with pytest.raises(EvalError):
        aggregate_kshot([0.7, 0.8])


def test_format_cell_byte_exact():
    assert format_cell(75.77, 2.67) == "75.77 (2.67)"
    assert format_cell(87.64, 0.44) == "87.64 (0.44)"
    assert format_cell(75.768, 2.666) == "75.77 (2.67)"
    assert format_cell(5.0, 0.0) == "5.00 (0.00)"


def _toy_report():
    return EvalReport(
        experiment_id="exp1",
        rows=[
            MetricRow("full", 75.77, 2.67, 93.31, 1.25),
            MetricRow("5-shot", 60.11, 3.02, 80.40, 2.10),
        ],
        provenance={"dataset": "toy"},
    )


def test_render_report_table_contains_cells():
    text = render_report(_toy_report(), format="table-text")
    assert "75.77 (2.67)" in text
    assert "5-shot" in text


def test_report_json_roundtrip():
    report = _toy_report()
    doc = render_report(report, format="json")
    back = report_from_json(doc)
    assert back.experiment_id == report.experiment_id
    assert back.rows == report.rows


def test_report_csv(tmp_path):
    path = tmp_path / "report.csv"
    write_report_csv(_toy_report(), path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 rows
    assert lines[1].startswith("full,")


def test_metric_row_bounds():
    with pytest.raises(EvalError):
        MetricRow("full", 140.0, 1.0, 90.0, 1.0)
    with pytest.raises(EvalError):
        MetricRow("full", 50.0, -1.0, 90.0, 1.0)
