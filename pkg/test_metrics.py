"""
Tests for classification and ranking metrics and the multi-seed report.
"""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from metrics import (
    EvalRecord,
    MetricError,
    MetricsReport,
    auprc_macro,
    auroc_binary,
    auroc_macro,
    auroc_pairwise,
    average_precision,
    average_precision_bruteforce,
    confusion_metrics,
    evaluate_records,
    records_from_arrays,
)


def test_auroc_worked_example():
    assert auroc_binary([True, False, True, False], [0.9, 0.8, 0.3, 0.2]) == pytest.approx(0.75)


def test_auroc_ties_get_half_credit():
    assert auroc_binary([True, False], [0.5, 0.5]) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(20))
def test_ranking_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 120))
    positive = rng.random(size) < 0.4
    positive[0], positive[1] = True, False
    scores = np.round(rng.random(size), 1)
    assert auroc_binary(positive, scores) == pytest.approx(auroc_pairwise(positive, scores), abs=1e-9)
    assert average_precision(positive, scores) == pytest.approx(
        average_precision_bruteforce(positive, scores), abs=1e-9)


def test_average_precision_perfect_ranking():
    assert average_precision([True, True, False], [0.9, 0.8, 0.1]) == pytest.approx(1.0)


def test_average_precision_inverted_pair():
    assert average_precision([True, False], [0.4, 0.6]) == pytest.approx(0.5)


def test_confusion_metrics_uneven_classes():
    labels = [0, 1, 0]
    probs = np.array([[0.8, 0.2], [0.3, 0.7], [0.4, 0.6]])
    m = confusion_metrics(records_from_arrays(labels, probs))
    assert m["accuracy"] == pytest.approx(2 / 3)
    assert m["precision"] == pytest.approx(0.75)
    assert m["recall"] == pytest.approx(0.75)
    assert m["f1"] == pytest.approx(2 / 3)


def test_undefined_auroc_raises():
    with pytest.raises(MetricError):
        auroc_binary([True, True], [0.2, 0.3])


def test_confusion_metrics_macro_average():
    labels = [0, 0, 1, 1]
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.6, 0.4]])
    m = confusion_metrics(records_from_arrays(labels, probs))
    assert m["accuracy"] == pytest.approx(0.5)
    assert m["precision"] == pytest.approx(0.5)
    assert m["recall"] == pytest.approx(0.5)
    assert m["f1"] == pytest.approx(0.5)


def test_argmax_tie_goes_to_lowest_index():
    m = confusion_metrics([EvalRecord(0, np.array([0.5, 0.5]))])
    assert m["accuracy"] == 1.0


def test_eval_record_validation():
    with pytest.raises(MetricError):
        EvalRecord(2, np.array([0.5, 0.5]))
    with pytest.raises(MetricError):
        EvalRecord(0, np.array([0.7, 0.7]))


def test_macro_ranking_metrics_skip_absent_classes():
    labels = [0, 1, 0, 1]
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.5, 0.4, 0.1], [0.3, 0.6, 0.1]])
    records = records_from_arrays(labels, probs)
    assert auroc_macro(records) == pytest.approx(1.0)
    assert auprc_macro(records) == pytest.approx(1.0)


def test_single_class_split_gives_nan_ranking_metrics():
    records = records_from_arrays([1, 1], np.array([[0.2, 0.8], [0.4, 0.6]]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = evaluate_records(records)
    assert np.isnan(out["auroc"])
    assert out["auprc"] == pytest.approx(1.0)
    assert any("auroc" in str(w.message) for w in caught)


def test_report_mean_and_population_std():
    runs = [{m: v for m in ("accuracy", "precision", "recall", "f1", "auroc", "auprc")} for v in (0.90, 0.92, 0.94)]
    report = MetricsReport.from_runs(runs)
    assert report.formatted("accuracy") == "92.00±1.63"
    assert_allclose(report.stds["f1"], np.std([0.90, 0.92, 0.94]))
    frame = report.to_frame()
    assert list(frame.index) == ["accuracy", "precision", "recall", "f1", "auroc", "auprc"]
    assert "92.00±1.63" in report.to_text()


def test_single_seed_report_has_zero_std():
    report = MetricsReport.from_runs([{"accuracy": 0.8, "precision": 0.7, "recall": 0.6,
                                       "f1": 0.65, "auroc": 0.9, "auprc": 0.85}])
    assert all(v == 0.0 for v in report.stds.values())
