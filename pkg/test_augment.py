"""
Tests for augmentation parsing and the seven transforms.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from augment import (
    AugmentationError,
    AugmentationSpec,
    apply,
    choose_spec,
    parse_pool,
    parse_spec,
    round_half_away,
    select_and_apply,
)


@pytest.fixture
def window():
    return np.random.default_rng(0).normal(size=(250, 12)).astype(np.float32)


@pytest.mark.parametrize("text,kind,degree", [
    ("jitter0.2", "jitter", 0.2),
    ("drop0.5", "drop", 0.5),
    ("scale", "scale", 0.2),
    ("shuffle", "shuffle", 0.5),
    ("mask0.1", "temporal_mask", 0.1),
    ("dropout0.3", "drop", 0.3),
    ("freqmask", "freq_mask", 0.1),
    ("none", "none", 0.0),
    ("  Jitter.05 ", "jitter", 0.05),
])
def test_parse_spec(text, kind, degree):
    spec = parse_spec(text)
    assert spec.kind == kind
    assert spec.parameter == pytest.approx(degree)


@pytest.mark.parametrize("text", ["wobble0.1", "drop1.5", "jitter-0.1", "none0.2", ""])
def test_parse_spec_rejects(text):
    with pytest.raises(AugmentationError):
        parse_spec(text)


def test_empty_pool_is_rejected(window):
    with pytest.raises(AugmentationError):
        parse_pool([])
    with pytest.raises(AugmentationError):
        select_and_apply(window, [], np.random.default_rng(0), training=True)


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, 24.9, -0.5)] == [1, 2, 3, 25, -1]


def test_shape_and_dtype_preserved(window):
    rng = np.random.default_rng(1)
    for text in ("none", "shuffle1", "mask0.3", "freqmask0.2", "jitter0.2", "scale0.2", "drop0.5"):
        out = apply(window, parse_spec(text), rng)
        assert out.shape == window.shape
        assert out.dtype == window.dtype


def test_temporal_mask_zeroes_rounded_row_count(window):
    out = apply(window, parse_spec("temporal_mask0.1"), np.random.default_rng(2))
    assert int(np.sum(np.all(out == 0, axis=1))) == 25


def test_drop_rate_is_close_to_degree(window):
    out = apply(window, parse_spec("drop0.5"), np.random.default_rng(3))
    assert abs(np.mean(out == 0) - 0.5) <= 3 * np.sqrt(0.25 / window.size)


def test_shuffle_permutes_channels(window):
    out = apply(window, AugmentationSpec("shuffle", 1.0), np.random.default_rng(4))
    assert_array_equal(np.sort(out, axis=1), np.sort(window, axis=1))
    assert_array_equal(apply(window, AugmentationSpec("shuffle", 0.0), np.random.default_rng(4)), window)


def test_freq_mask_zero_is_a_round_trip(window):
    out = apply(window, AugmentationSpec("freq_mask", 0.0), np.random.default_rng(5))
    assert_allclose(out, window, atol=1e-4)


def test_freq_mask_removes_spectrum_bins(window):
    out = apply(window, AugmentationSpec("freq_mask", 0.5), np.random.default_rng(6))
    spectrum = np.fft.rfft(out.astype(np.float64), axis=0)
    zero_bins = np.sum(np.abs(spectrum) < 1e-3, axis=0)
    assert np.all(zero_bins >= round_half_away(0.5 * (250 // 2 + 1)) - 1)


def test_scale_multiplies_each_channel_once(window):
    out = apply(window, AugmentationSpec("scale", 0.2), np.random.default_rng(7))
    ratios = out / window
    assert_allclose(ratios, ratios[0:1, :], rtol=1e-5)
    assert np.all((ratios[0] >= 0.8 - 1e-6) & (ratios[0] <= 1.2 + 1e-6))


def test_jitter_zero_is_identity(window):
    assert_array_equal(apply(window, AugmentationSpec("jitter", 0.0), np.random.default_rng(8)), window)


def test_pool_selection_is_uniform():
    pool = parse_pool(["jitter0.2", "scale0.2", "drop0.5"])
    rng = np.random.default_rng(9)
    counts = {str(s): 0 for s in pool}
    for _ in range(3000):
        counts[str(choose_spec(pool, rng))] += 1
    bound = 3 * np.sqrt(3000 * (1 / 3) * (2 / 3))
    assert all(abs(c - 1000) <= bound for c in counts.values())


def test_eval_mode_never_augments(window):
    pool = parse_pool(["drop0.9"])
    assert select_and_apply(window, pool, np.random.default_rng(0), training=False) is window
