"""
Tests for Adam, early stopping, the training loop and multi-seed runs.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cardioformer_model import ModelConfig, init_parameters, loss, predict_proba
from dataio import Sample, generate_synthetic, subject_split
from embedding import DEFAULT_PATCH_LIST
from numerics import ParameterStore
from training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    TrainingError,
    adam_step,
    check_subject_independence,
    evaluate,
    multi_seed_run,
    train_loop,
)
from verification import TINY_CONFIG


QUICK = ModelConfig(patch_lens=(2, 4), d_model=8, n_layers=1, n_heads=2, d_ff=16,
                    n_classes=2, timestamps=16, channels=2)

# 12-lead windows at 250 Hz with the full patch list and a narrow model
ACCEPTANCE = ModelConfig(patch_lens=DEFAULT_PATCH_LIST, d_model=32, n_layers=1, n_heads=4, d_ff=64,
                         n_classes=4, timestamps=250, channels=12)


def _quick_data(subjects=6, per_subject=4, seed=0):
    return generate_synthetic(2, subjects, per_subject, 16, 2, seed=seed)


def _store():
    store = ParameterStore("float64")
    store.add("w", np.array([[0.5, -1.0], [2.0, 0.0]]))
    store.add("table", np.ones(3), trainable=False)
    return store


def test_adam_first_step_closed_form():
    store = _store()
    g = np.array([[0.1, -3.0], [1e-3, 2.0]])
    before = store["w"].data.copy()
    config = TrainConfig(learning_rate=1e-2)
    adam_step(store, {"w": g}, AdamState.zeros(store), config)
    assert_allclose(store["w"].data, before - 1e-2 * g / (np.abs(g) + config.eps))


def test_adam_zero_lr_and_zero_grad_leave_parameters_unchanged():
    store = _store()
    before = store["w"].data.copy()
    adam_step(store, {"w": np.ones((2, 2))}, AdamState.zeros(store), TrainConfig(learning_rate=0.0))
    assert_array_equal(store["w"].data, before)
    state = AdamState.zeros(store)
    adam_step(store, {"w": np.zeros((2, 2))}, state, TrainConfig())
    assert_array_equal(store["w"].data, before)
    assert state.step == 1


def test_adam_never_touches_frozen_tensors():
    store = _store()
    state = AdamState.zeros(store)
    for _ in range(3):
        adam_step(store, {"w": np.ones((2, 2))}, state, TrainConfig(learning_rate=0.1))
    assert_array_equal(store["table"].data, np.ones(3))
    assert "table" not in state.m


def test_adam_rejects_non_finite_gradient_by_name():
    store = _store()
    with pytest.raises(TrainingError, match="'w'"):
        adam_step(store, {"w": np.array([[np.nan, 0], [0, 0]])}, AdamState.zeros(store), TrainConfig())


def test_early_stopping_counts_strict_improvements():
    stopper = EarlyStopping(patience=3)
    stopped_at = None
    for epoch, score in enumerate([0.5, 0.6, 0.6, 0.6, 0.6], start=1):
        if stopper(epoch, score, lambda epoch=epoch: epoch):
            stopped_at = epoch
            break
    assert stopped_at == 5
    assert stopper.best_epoch == 2
    assert stopper.best_state == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=5, max_epochs=3)
    with pytest.raises(ValueError, match="Unknown train config keys"):
        TrainConfig.from_dict({"momentum": 0.9})


def test_subject_overlap_is_refused():
    _, samples = _quick_data()
    with pytest.raises(TrainingError, match="train/validation subject overlap"):
        check_subject_independence(samples[:8], samples[6:10])


def test_subject_overlap_with_test_partition_is_refused():
    _, samples = _quick_data()
    train, val, test = samples[:8], samples[8:12], samples[12:]
    check_subject_independence(train, val, test)
    with pytest.raises(TrainingError, match="train/test subject overlap"):
        check_subject_independence(train, val, samples[4:8] + test)
    with pytest.raises(TrainingError, match="validation/test subject overlap"):
        check_subject_independence(train, val, samples[10:])


def test_degenerate_labels_are_refused():
    _, samples = _quick_data()
    train = [s for s in samples if s.label == 0][:6]
    val = [Sample("v", "other", 1, samples[0].window)]
    with pytest.raises(TrainingError, match="degenerate label distribution"):
        train_loop(QUICK, train, val, TrainConfig(max_epochs=1, patience=1), seed=0)


def test_overfitting_a_fixed_batch_lowers_the_loss():
    config = TINY_CONFIG
    store = init_parameters(config)
    windows = np.random.default_rng(0).normal(size=(4, config.timestamps, config.channels))
    labels = np.array([0, 1, 0, 1])
    state = AdamState.zeros(store)
    train_config = TrainConfig(learning_rate=1e-3)
    losses = []
    for step in range(6):
        store.zero_grad()
        value = loss(store, config, windows, labels, "train", np.random.default_rng(step))
        losses.append(value.item())
        if step < 5:
            value.backward()
            adam_step(store, store.grads(), state, train_config)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_loop_is_reproducible_and_returns_best_epoch():
    manifest, samples = _quick_data()
    parts = subject_split(manifest, seed=0).partition(samples)
    train_config = TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=3, patience=3)
    ckpt_a, history_a = train_loop(QUICK, parts["train"], parts["validation"], train_config, seed=41)
    ckpt_b, history_b = train_loop(QUICK, parts["train"], parts["validation"], train_config, seed=41)
    assert history_a == history_b
    assert [h["epoch"] for h in history_a] == [1, 2, 3]
    assert ckpt_a.best_val_f1 == max(h["val_f1"] for h in history_a)
    assert ckpt_a.epoch == next(h["epoch"] for h in history_a if h["val_f1"] == ckpt_a.best_val_f1)
    assert ckpt_a.config.seed == 41
    for name in ckpt_a.store.names():
        assert_array_equal(ckpt_a.store[name].data, ckpt_b.store[name].data)
    assert_array_equal(ckpt_a.store["embed.pos"].data, init_parameters(QUICK)["embed.pos"].data)


def test_multi_seed_run_shares_the_split():
    manifest, samples = _quick_data()
    split = subject_split(manifest, seed=0)
    train_config = TrainConfig(batch_size=8, max_epochs=1, patience=1, seeds=(1, 2))
    seen = []
    result = multi_seed_run(QUICK, samples, split, train_config, on_seed_done=lambda r: seen.append(r.seed))
    assert seen == [1, 2]
    assert result.split is split
    assert len(result.report.runs) == 2
    assert all(run.seconds > 0 for run in result.runs)
    for run in result.runs:
        _, metrics = evaluate(run.checkpoint.store, run.checkpoint.config, split.partition(samples)["test"])
        assert metrics == run.test_metrics


@pytest.mark.slow
def test_tiny_synthetic_task_is_learned():
    manifest, samples = generate_synthetic(2, 6, 10, 64, 2, seed=0)
    parts = subject_split(manifest, seed=0).partition(samples)
    config = ModelConfig(patch_lens=(4, 8, 16), d_model=16, n_layers=1, n_heads=2, d_ff=32,
                         n_classes=2, timestamps=64, channels=2)
    train_config = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=10, patience=10)
    _, history = train_loop(config, parts["train"], parts["validation"], train_config, seed=41)
    assert max(h["val_f1"] for h in history) > 0.9


@pytest.mark.slow
def test_small_training_subset_is_memorized():
    _, samples = generate_synthetic(4, 8, 2, 250, 12, seed=1)
    config = ACCEPTANCE
    store = init_parameters(config)
    windows = np.stack([s.window for s in samples])
    labels = np.array([s.label for s in samples])
    assert len(samples) == 16
    state = AdamState.zeros(store)
    train_config = TrainConfig(learning_rate=1e-3)
    accuracy = 0.0
    for step in range(200):
        store.zero_grad()
        loss(store, config, windows, labels, "train", np.random.default_rng(step)).backward()
        adam_step(store, store.grads(), state, train_config)
        if step % 20 == 19:
            accuracy = np.mean(predict_proba(store, config, windows).argmax(axis=1) == labels)
            if accuracy == 1.0:
                break
    assert accuracy == 1.0


@pytest.mark.slow
def test_four_class_synthetic_task_over_three_seeds():
    manifest, samples = generate_synthetic(4, 30, 10, 250, 12, seed=0)
    split = subject_split(manifest, seed=0)
    train_config = TrainConfig(learning_rate=1e-3, seeds=(41, 42, 43))
    result = multi_seed_run(ACCEPTANCE, samples, split, train_config)
    assert [r.seed for r in result.runs] == [41, 42, 43]
    assert result.report.means["accuracy"] >= 0.95
    assert result.report.means["auroc"] >= 0.98
    assert all(r.seconds < 600 for r in result.runs), [round(r.seconds) for r in result.runs]
