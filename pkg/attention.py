"""
Two-stage router attention.

Stage 1 (intra): every granularity attends over its own tokens plus its router,
z = [x ; u]. Stage 2 (inter): the routers of all granularities attend over each
other. Cross-granularity information only travels through the routers, which
keeps the score count at sum_i (N_i + 1)^2 + n^2 per layer instead of
(sum_i N_i + n)^2 for one joint sequence.
"""

import contextlib
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from embedding import GranularityBundle, GranularityConfig
from numerics import (
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    concat,
    dropout,
    glorot_uniform,
    layer_norm,
    matmul,
    mul,
    relu,
    softmax,
    take,
)


# Multiplier on the 1/sqrt(d_head) score scale; only the verification
# mutation hook changes it.
_SCORE_SCALE_FACTOR = 1.0


@contextlib.contextmanager
def scale_mutation(factor: float) -> Iterator[None]:
    """Temporarily multiply every attention score scale by `factor`."""
    global _SCORE_SCALE_FACTOR
    previous = _SCORE_SCALE_FACTOR
    _SCORE_SCALE_FACTOR = float(factor)
    try:
        yield
    finally:
        _SCORE_SCALE_FACTOR = previous


@dataclass
class ScoreCounter:
    """Counts query-key score evaluations per sample."""
    pairs: int = 0
    calls: int = 0

    def record(self, queries: int, keys: int) -> None:
        self.pairs += queries * keys
        self.calls += 1


@dataclass
class Projection:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> "Projection":
        return cls(*(store[f"{prefix}.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")))


@dataclass
class AttentionParams:
    """One encoder layer's weights; projections are shared by all granularities."""
    intra: Projection
    inter: Projection
    norm_intra: Tuple[Tensor, Tensor]
    norm_inter: Tuple[Tensor, Tensor]
    norm_ffn: Tuple[Tensor, Tensor]
    ffn: Tuple[Tensor, Tensor, Tensor, Tensor]
    n_heads: int
    attn_dropout: float = 0.0

    def __post_init__(self):
        width = self.intra.wq.shape[0]
        if width % self.n_heads:
            raise ShapeError(f"Model width D={width} is not divisible by H={self.n_heads} heads")

    @classmethod
    def from_store(cls, store: ParameterStore, layer: int, n_heads: int,
                   attn_dropout: float = 0.0) -> "AttentionParams":
        p = f"layer{layer}"

        def norm(name):
            return store[f"{p}.{name}.gamma"], store[f"{p}.{name}.beta"]

        return cls(
            intra=Projection.from_store(store, f"{p}.intra"),
            inter=Projection.from_store(store, f"{p}.inter"),
            norm_intra=norm("norm_intra"),
            norm_inter=norm("norm_inter"),
            norm_ffn=norm("norm_ffn"),
            ffn=tuple(store[f"{p}.ffn.{n}"] for n in ("w1", "b1", "w2", "b2")),
            n_heads=n_heads,
            attn_dropout=attn_dropout,
        )


def init_attention_parameters(store: ParameterStore, layer: int, d_model: int, d_ff: int,
                              rng: np.random.Generator) -> None:
    p = f"layer{layer}"
    for stage in ("intra", "inter"):
        for name in ("q", "k", "v", "o"):
            store.add(f"{p}.{stage}.w{name}", glorot_uniform(rng, (d_model, d_model), store.dtype))
            store.add(f"{p}.{stage}.b{name}", np.zeros(d_model))
    for name in ("norm_intra", "norm_inter"):
        store.add(f"{p}.{name}.gamma", np.ones(d_model))
        store.add(f"{p}.{name}.beta", np.zeros(d_model))
    store.add(f"{p}.ffn.w1", glorot_uniform(rng, (d_model, d_ff), store.dtype))
    store.add(f"{p}.ffn.b1", np.zeros(d_ff))
    store.add(f"{p}.ffn.w2", glorot_uniform(rng, (d_ff, d_model), store.dtype))
    store.add(f"{p}.ffn.b2", np.zeros(d_model))
    store.add(f"{p}.norm_ffn.gamma", np.ones(d_model))
    store.add(f"{p}.norm_ffn.beta", np.zeros(d_model))


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, proj: Projection, n_heads: int,
                         counter: Optional[ScoreCounter] = None, attn_dropout: float = 0.0,
                         rng: Optional[np.random.Generator] = None, training: bool = False,
                         return_weights: bool = False):
    """
    Scaled dot-product attention over (B, rows, D) inputs.

    Heads are contiguous column blocks of width D/H; their outputs are
    concatenated and passed through the output projection.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(f"attention: keys {keys.shape} and values {values.shape} differ in row count")
    width = queries.shape[-1]
    if width % n_heads:
        raise ShapeError(f"attention: width {width} not divisible by {n_heads} heads")
    head = width // n_heads
    scale = _SCORE_SCALE_FACTOR / np.sqrt(head)

    q = add(matmul(queries, proj.wq), proj.bq)
    k = add(matmul(keys, proj.wk), proj.bk)
    v = add(matmul(values, proj.wv), proj.bv)

    outputs, weights = [], []
    for h in range(n_heads):
        cols = (Ellipsis, slice(h * head, (h + 1) * head))
        scores = mul(matmul(take(q, cols), take(k, cols), transpose_b=True), scale)
        attn = softmax(scores, axis=-1)
        weights.append(attn)
        attn = dropout(attn, attn_dropout, rng, training)
        outputs.append(matmul(attn, take(v, cols)))
    if counter is not None:
        counter.record(queries.shape[-2], keys.shape[-2])

    merged = outputs[0] if n_heads == 1 else concat(outputs, axis=-1)
    out = add(matmul(merged, proj.wo), proj.bo)
    return (out, weights) if return_weights else out


def attn_intra(bundle: GranularityBundle, params: AttentionParams, counter: Optional[ScoreCounter] = None,
               rng: Optional[np.random.Generator] = None, training: bool = False) -> GranularityBundle:
    """
    Attention of tokens and router over z = [tokens ; router].

    Both updates read the same pre-update z. Returns the raw attention
    outputs as a bundle (residual and norm are applied by encoder_layer).
    """
    z = concat([bundle.tokens, bundle.router], axis=-2)
    out = multi_head_attention(z, z, z, params.intra, params.n_heads, counter,
                               params.attn_dropout, rng, training)
    n = bundle.n_tokens
    return GranularityBundle(take(out, (slice(None), slice(0, n))),
                             take(out, (slice(None), slice(n, n + 1))), bundle.index)


def attn_inter(routers: Sequence[Tensor], params: AttentionParams, counter: Optional[ScoreCounter] = None,
               rng: Optional[np.random.Generator] = None, training: bool = False) -> List[Tensor]:
    """Each (B, 1, D) router queries the stack of all routers."""
    if not routers:
        raise ShapeError("attn_inter: need at least one router")
    stacked = concat(list(routers), axis=-2)
    out = multi_head_attention(stacked, stacked, stacked, params.inter, params.n_heads, counter,
                               params.attn_dropout, rng, training)
    return [take(out, (slice(None), slice(i, i + 1))) for i in range(len(routers))]


def feed_forward(x: Tensor, params: AttentionParams) -> Tensor:
    w1, b1, w2, b2 = params.ffn
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


def _split(y: Tensor, n: int, index: int) -> GranularityBundle:
    return GranularityBundle(take(y, (slice(None), slice(0, n))),
                             take(y, (slice(None), slice(n, n + 1))), index)


def intra_stage(bundles: Sequence[GranularityBundle], params: AttentionParams,
                counter: Optional[ScoreCounter] = None, rng: Optional[np.random.Generator] = None,
                training: bool = False) -> List[GranularityBundle]:
    """Residual + layer norm around attn_intra, independently per granularity."""
    gamma, beta = params.norm_intra
    out = []
    for bundle in bundles:
        update = attn_intra(bundle, params, counter, rng, training)
        z = concat([bundle.tokens, bundle.router], axis=-2)
        z = layer_norm(add(z, concat([update.tokens, update.router], axis=-2)), gamma, beta)
        out.append(_split(z, bundle.n_tokens, bundle.index))
    return out


def inter_stage(bundles: Sequence[GranularityBundle], params: AttentionParams,
                counter: Optional[ScoreCounter] = None, rng: Optional[np.random.Generator] = None,
                training: bool = False) -> List[GranularityBundle]:
    """Residual + layer norm around attn_inter; tokens pass through."""
    gamma, beta = params.norm_inter
    routers = [b.router for b in bundles]
    updates = attn_inter(routers, params, counter, rng, training)
    return [GranularityBundle(b.tokens, layer_norm(add(u, du), gamma, beta), b.index)
            for b, u, du in zip(bundles, routers, updates)]


def ffn_stage(bundles: Sequence[GranularityBundle], params: AttentionParams) -> List[GranularityBundle]:
    gamma, beta = params.norm_ffn
    out = []
    for bundle in bundles:
        y = concat([bundle.tokens, bundle.router], axis=-2)
        y = layer_norm(add(y, feed_forward(y, params)), gamma, beta)
        out.append(_split(y, bundle.n_tokens, bundle.index))
    return out


def encoder_layer(bundles: Sequence[GranularityBundle], params: AttentionParams,
                  counter: Optional[ScoreCounter] = None, rng: Optional[np.random.Generator] = None,
                  training: bool = False) -> List[GranularityBundle]:
    """
    intra-attention -> inter-attention -> feed-forward, each wrapped in a
    post-norm residual. The feed-forward runs per granularity on tokens and
    router together.
    """
    bundles = intra_stage(bundles, params, counter, rng, training)
    bundles = inter_stage(bundles, params, counter, rng, training)
    return ffn_stage(bundles, params)


def count_attention_pairs(granularity: GranularityConfig, mode: str = "two_stage") -> int:
    """Query-key score evaluations per layer per sample."""
    counts = granularity.patch_counts
    n = len(counts)
    if mode == "two_stage":
        return sum((c + 1) ** 2 for c in counts) + n ** 2
    if mode == "joint":
        return (sum(counts) + n) ** 2
    raise ValueError(f"Unknown attention mode '{mode}' (expected two_stage or joint)")
