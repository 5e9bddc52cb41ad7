"""
Tests for two-stage router attention.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from attention import (
    AttentionParams,
    ScoreCounter,
    attn_inter,
    attn_intra,
    count_attention_pairs,
    encoder_layer,
    init_attention_parameters,
    intra_stage,
    multi_head_attention,
    scale_mutation,
)
from embedding import DEFAULT_PATCH_LIST, GranularityBundle, GranularityConfig
from numerics import ParameterStore, ShapeError, Tensor, layer_norm


D = 8


def _params(layers=1, heads=2, seed=0):
    store = ParameterStore("float64")
    rng = np.random.default_rng(seed)
    for m in range(layers):
        init_attention_parameters(store, m, D, 16, rng)
    return [AttentionParams.from_store(store, m, heads) for m in range(layers)]


def _bundles(counts=(4, 2, 1), batch=1, seed=1):
    rng = np.random.default_rng(seed)
    return [GranularityBundle(Tensor(rng.normal(size=(batch, n, D))), Tensor(rng.normal(size=(batch, 1, D))), i)
            for i, n in enumerate(counts)]


def test_pair_formula_small_example():
    g = GranularityConfig((2, 4), 8)
    assert count_attention_pairs(g, "two_stage") == 38
    assert count_attention_pairs(g, "joint") == 64


def test_two_stage_is_cheaper_at_full_scale():
    g = GranularityConfig(DEFAULT_PATCH_LIST, 250)
    assert count_attention_pairs(g, "joint") / count_attention_pairs(g, "two_stage") > 2.4


def test_counter_matches_formula():
    params = _params()[0]
    counter = ScoreCounter()
    encoder_layer(_bundles((4, 2, 1)), params, counter)
    assert counter.pairs == 25 + 9 + 4 + 9
    assert counter.calls == 4


def test_attention_weights_are_row_stochastic():
    params = _params()[0]
    x = Tensor(np.random.default_rng(2).normal(size=(2, 5, D)))
    out, weights = multi_head_attention(x, x, x, params.intra, 2, return_weights=True)
    assert out.shape == (2, 5, D)
    assert len(weights) == 2
    for w in weights:
        assert w.shape == (2, 5, 5)
        assert_allclose(w.data.sum(axis=-1), 1.0)


def test_intra_attention_never_reads_other_granularities():
    params = _params()[0]
    base = _bundles()
    moved = list(base)
    moved[0] = GranularityBundle(Tensor(base[0].tokens.data + 5.0), base[0].router, 0)
    a, b = intra_stage(base, params), intra_stage(moved, params)
    for i in (1, 2):
        assert_array_equal(a[i].tokens.data, b[i].tokens.data)
        assert_array_equal(a[i].router.data, b[i].router.data)
    assert not np.allclose(a[0].tokens.data, b[0].tokens.data)


def test_information_crosses_granularities_only_through_routers():
    first, second = _params(layers=2)
    base = _bundles()
    moved = list(base)
    moved[0] = GranularityBundle(Tensor(base[0].tokens.data + 5.0), base[0].router, 0)
    one_a, one_b = encoder_layer(base, first), encoder_layer(moved, first)
    # after one layer only the other routers have heard about the change
    assert_array_equal(one_a[1].tokens.data, one_b[1].tokens.data)
    assert not np.allclose(one_a[1].router.data, one_b[1].router.data)
    two_a, two_b = encoder_layer(one_a, second), encoder_layer(one_b, second)
    assert not np.allclose(two_a[1].tokens.data, two_b[1].tokens.data)


def test_intra_update_reads_pre_update_state():
    """Token and router updates both come from one attention call over [tokens ; router]."""
    params = _params()[0]
    bundle = _bundles((3,))[0]
    update = attn_intra(bundle, params)
    z = Tensor(np.concatenate([bundle.tokens.data, bundle.router.data], axis=1))
    full = multi_head_attention(z, z, z, params.intra, params.n_heads).data
    assert_allclose(update.tokens.data, full[:, :3])
    assert_allclose(update.router.data, full[:, 3:])


def test_single_granularity_router_attends_to_itself():
    params = _params()[0]
    router = _bundles((2,))[0].router
    (out,) = attn_inter([router], params)
    assert out.shape == (1, 1, D)


def test_heads_must_divide_width():
    params = _params()[0]
    x = Tensor(np.zeros((1, 3, D)))
    with pytest.raises(ShapeError, match="divisible"):
        multi_head_attention(x, x, x, params.intra, 3)


def test_scale_mutation_changes_outputs_and_restores():
    params = _params()[0]
    bundles = _bundles()
    reference = encoder_layer(bundles, params)[0].tokens.data
    with scale_mutation(3.0):
        mutated = encoder_layer(bundles, params)[0].tokens.data
    restored = encoder_layer(bundles, params)[0].tokens.data
    assert not np.allclose(reference, mutated)
    assert_array_equal(reference, restored)


def test_layer_preserves_shapes():
    params = _params()[0]
    out = encoder_layer(_bundles((4, 2, 1), batch=3), params)
    assert [b.tokens.shape for b in out] == [(3, 4, D), (3, 2, D), (3, 1, D)]
    assert all(b.router.shape == (3, 1, D) for b in out)


def test_inter_attention_is_permutation_equivariant():
    params = _params()[0]
    routers = [b.router for b in _bundles((1, 1, 1, 1), batch=2, seed=4)]
    order = [2, 0, 3, 1]
    out = attn_inter(routers, params)
    permuted = attn_inter([routers[i] for i in order], params)
    for position, i in enumerate(order):
        assert_allclose(permuted[position].data, out[i].data, atol=1e-12)


def test_identical_routers_receive_identical_updates():
    params = _params()[0]
    router = _bundles((1,), batch=2, seed=5)[0].router
    out = attn_inter([router, router, router], params)
    for other in out[1:]:
        assert_allclose(other.data, out[0].data, atol=1e-12)


def test_zero_attention_and_feed_forward_weights_leave_only_layer_norm():
    store = ParameterStore("float64")
    init_attention_parameters(store, 0, D, 16, np.random.default_rng(0))
    for name in store.trainable_names():
        if ".intra." in name or ".inter." in name or ".ffn." in name:
            store[name].data[...] = 0.0
    params = AttentionParams.from_store(store, 0, 2)
    bundles = _bundles((4, 2), batch=2, seed=6)
    out = encoder_layer(bundles, params)
    ones, zeros = Tensor(np.ones(D)), Tensor(np.zeros(D))
    for before, after in zip(bundles, out):
        assert_allclose(after.tokens.data, layer_norm(before.tokens, ones, zeros).data, atol=1e-5)
        assert_allclose(after.router.data, layer_norm(before.router, ones, zeros).data, atol=1e-5)
