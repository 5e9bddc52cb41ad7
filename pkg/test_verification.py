"""
Tests for the acceptance suites, including the mutation check on the
attention score scale and the frozen logit reference.
"""

import json

import numpy as np
import pytest

import verification
from verification import REFERENCE_LOGITS, SUITES, run_suites, snapshot_windows


def _by_name(results):
    return {r.name: r.passed for r in results}


@pytest.mark.parametrize("suite", ["isolation", "pairs", "metrics", "augment"])
def test_suite_passes(suite):
    results = SUITES[suite]()
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


def test_snapshot_matches_the_built_in_reference():
    results = run_suites(["snapshot"])
    assert all(r.passed for r in results), [r.line() for r in results]


def test_snapshot_windows_are_closed_form():
    windows = snapshot_windows()
    assert windows.shape == (4, 16, 2)
    assert windows[2, 5, 1] == pytest.approx(np.sin(0.7 * 5 + 1.3 + 1.0))


def test_shifted_logits_fail_the_snapshot(monkeypatch):
    original = verification.snapshot_logits
    monkeypatch.setattr(verification, "snapshot_logits", lambda: original() + 5.0)
    assert not any(r.passed for r in run_suites(["snapshot"]))


def test_perturbed_head_bias_fails_the_snapshot(monkeypatch):
    original = verification.snapshot_store

    def perturbed(config=verification.TINY_CONFIG):
        store = original(config)
        store["head.b"].data[0] += 1e-3
        return store

    monkeypatch.setattr(verification, "snapshot_store", perturbed)
    results = run_suites(["snapshot"])
    assert not results[0].passed
    assert "max diff" in results[0].detail


def test_missing_reference_file_fails(tmp_path):
    path = tmp_path / "absent.json"
    results = run_suites(["snapshot"], snapshot_path=path)
    assert not results[0].passed
    assert "not found" in results[0].detail
    assert not path.exists()


def test_reference_file_is_compared(tmp_path):
    path = tmp_path / "reference.json"
    path.write_text(json.dumps({"logits": REFERENCE_LOGITS.tolist()}), encoding="utf-8")
    assert run_suites(["snapshot"], snapshot_path=path)[0].passed
    path.write_text(json.dumps({"logits": (REFERENCE_LOGITS + 1e-3).tolist()}), encoding="utf-8")
    assert not run_suites(["snapshot"], snapshot_path=path)[0].passed


def test_mutated_attention_scale_is_caught_by_snapshot_only():
    results = _by_name(run_suites(["pairs", "snapshot"], mutate_attention_scale=2.0))
    assert results["instrumented pair count"]
    assert not results["logit snapshot"]


@pytest.mark.slow
def test_gradient_suite_survives_the_mutation():
    results = run_suites(["grads"], mutate_attention_scale=2.0)
    assert all(r.passed for r in results)


def test_unknown_suite_is_rejected():
    with pytest.raises(ValueError, match="Unknown suite"):
        run_suites(["everything"])
