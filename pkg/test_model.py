"""
Tests for the classifier: configuration, forward pass and checkpoints
Runs under pytest, or directly for a PASS/FAIL summary:

    python test_model.py
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from cardioformer_model import (
    Checkpoint,
    CheckpointError,
    ConfigError,
    ModelConfig,
    check_compatible,
    forward,
    init_parameters,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from numerics import NonFiniteError, ShapeError
from verification import TINY_CONFIG, tiny_model_gradient_error


SMALL = ModelConfig(patch_lens=(2, 4, 8), d_model=8, n_layers=2, n_heads=2, d_ff=16,
                    n_classes=3, timestamps=16, channels=2, dtype="float64")


def _windows(count=4, config=SMALL, seed=0):
    return np.random.default_rng(seed).normal(size=(count, config.timestamps, config.channels))


def test_parameter_count_of_tiny_model():
    """Trainable count follows the layer formulas; the positional table is frozen."""
    store = init_parameters(TINY_CONFIG)
    assert store.num_parameters() == 2026
    assert store.num_parameters(trainable_only=False) == 2130
    assert "embed.pos" not in store.trainable_names()


def test_forward_shapes():
    store = init_parameters(SMALL)
    windows = _windows()
    assert forward(windows[0], store, SMALL).shape == (3,)
    assert forward(windows, store, SMALL).shape == (4, 3)


def test_eval_forward_is_pure_and_per_sample():
    store = init_parameters(SMALL)
    windows = _windows()
    batch = forward(windows, store, SMALL, "eval").data
    again = forward(windows, store, SMALL, "eval").data
    assert_array_equal(batch, again)
    single = np.stack([forward(w, store, SMALL, "eval").data for w in windows])
    assert_allclose(single, batch, atol=1e-10)


def test_train_mode_is_seeded():
    config = SMALL.replace(augmentations=("jitter0.2", "drop0.5"))
    windows = _windows()
    outs = []
    for _ in range(2):
        store = init_parameters(config)
        outs.append(forward(windows, store, config, "train", np.random.default_rng(5)).data)
    assert_array_equal(outs[0], outs[1])
    assert not np.allclose(outs[0], forward(windows, init_parameters(config), config, "eval").data)


def test_wrong_window_shape_is_rejected():
    store = init_parameters(SMALL)
    with pytest.raises(ShapeError, match=r"\(16, 2\)"):
        forward(np.zeros((3, 15, 2)), store, SMALL)


def test_non_finite_input_names_the_stage():
    store = init_parameters(SMALL)
    windows = _windows()
    windows[1, 3, 0] = np.nan
    with pytest.raises(NonFiniteError, match="embedding"):
        forward(windows, store, SMALL)


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        SMALL.replace(n_heads=3)
    with pytest.raises(ConfigError, match="Unknown model config keys"):
        ModelConfig.from_dict({**SMALL.to_dict(), "dropout_everywhere": 0.1})
    with pytest.raises(ConfigError, match="pos_table_size"):
        SMALL.replace(pos_table_size=4)
    with pytest.raises(ConfigError):
        SMALL.replace(augmentations=("wobble",))
    with pytest.raises(ConfigError, match="exceeds"):
        SMALL.replace(patch_lens=(32,))


def test_head_width_options():
    assert SMALL.head_inputs == 3 * 8
    assert SMALL.replace(include_routers=True).head_inputs == 6 * 8
    flat = SMALL.replace(head_pooling="flatten")
    assert flat.head_inputs == (8 + 4 + 2) * 8
    assert forward(_windows(2, flat), init_parameters(flat), flat).shape == (2, 3)


def test_predict_proba_rows_sum_to_one():
    store = init_parameters(SMALL)
    probs = predict_proba(store, SMALL, _windows(5), batch_size=2)
    assert probs.shape == (5, 3)
    assert_allclose(probs.sum(axis=1), 1.0)


def test_checkpoint_round_trip_reproduces_logits():
    config = SMALL.replace(dtype="float32")
    store = init_parameters(config)
    windows = _windows(config=config).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, Checkpoint(config, store, epoch=3, best_val_f1=0.5, meta={"seed": 41}))
        loaded = load_checkpoint(path)
    assert loaded.config == config
    assert loaded.epoch == 3 and loaded.best_val_f1 == 0.5 and loaded.meta["seed"] == 41
    assert_array_equal(forward(windows, loaded.store, loaded.config).data,
                       forward(windows, store, config).data)


def test_channel_order_matters():
    store = init_parameters(SMALL)
    windows = _windows()
    swapped = windows[..., ::-1]
    assert not np.allclose(forward(windows, store, SMALL).data, forward(swapped, store, SMALL).data)


def test_second_encoder_layer_changes_logits():
    deep = SMALL
    shallow = SMALL.replace(n_layers=1)
    deep_store = init_parameters(deep)
    shallow_store = init_parameters(shallow)
    for name in shallow_store.names():
        shallow_store[name].data[...] = deep_store[name].data
    windows = _windows()
    assert not np.allclose(forward(windows, shallow_store, shallow).data,
                           forward(windows, deep_store, deep).data)


def test_float64_checkpoint_round_trip_is_exact_on_ten_windows():
    store = init_parameters(SMALL)
    windows = _windows(10)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, Checkpoint(SMALL, store))
        loaded = load_checkpoint(path)
    for name in store.names():
        assert loaded.store[name].data.dtype == np.float64
        assert_array_equal(loaded.store[name].data, store[name].data)
    assert_array_equal(forward(windows, loaded.store, SMALL).data, forward(windows, store, SMALL).data)


def test_truncated_checkpoint_is_rejected():
    config = SMALL.replace(dtype="float32")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, Checkpoint(config, init_parameters(config)))
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


def test_header_without_required_entry_is_rejected():
    for key in ("tensors", "config", "payload_dtype"):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.ckpt"
            save_checkpoint(path, Checkpoint(SMALL, init_parameters(SMALL)))
            data = path.read_bytes()
            newline = data.index(b"\n")
            end = newline + 1 + int(data[:newline])
            header = json.loads(data[newline + 1:end])
            del header[key]
            encoded = json.dumps(header).encode("utf-8")
            path.write_bytes(f"{len(encoded)}\n".encode("ascii") + encoded + data[end:])
            with pytest.raises(CheckpointError, match=key):
                load_checkpoint(path)


def test_class_count_guard():
    ckpt = Checkpoint(SMALL, init_parameters(SMALL))
    check_compatible(ckpt, 3, 16, 2)
    with pytest.raises(CheckpointError, match="class count mismatch"):
        check_compatible(ckpt, 4, 16, 2)
    with pytest.raises(CheckpointError, match="window shape"):
        check_compatible(ckpt, 3, 32, 2)


def test_tiny_model_gradients_match_finite_differences():
    assert tiny_model_gradient_error() < 1e-4


def main():
    """Run all tests"""
    print("\n" + "=" * 80)
    print("CLASSIFIER - TEST SUITE")
    print("=" * 80)

    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    results = []
    for name, fn in tests:
        try:
            fn()
            results.append((name, True))
        except Exception as e:
            print(f"  {name}: {type(e).__name__}: {e}")
            results.append((name, False))

    print("\n" + "=" * 80)
    print("TEST SUMMARY")
    print("=" * 80)
    for name, passed in results:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}")

    total_passed = sum(1 for _, p in results if p)
    print(f"\nTotal: {total_passed}/{len(results)} tests passed")
    return 0 if total_passed == len(results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
