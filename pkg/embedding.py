"""
Cross-channel multi-granularity patch embedding.

A (T, C) window is cut into non-overlapping L_i x C patches for every patch
length L_i. Each granularity has its own residual patch encoder (three
pointwise-conv / batch-norm blocks, layer norm, mean over the L_i positions)
producing one D-dimensional token per patch. Tokens get a fixed sinusoidal
positional row and a learnable per-granularity embedding; each granularity
also gets a router token built from the next positional row.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from numerics import (
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    glorot_uniform,
    layer_norm,
    mean,
    mul,
    pointwise_conv,
    relu,
    take,
)


DEFAULT_PATCH_LIST: Tuple[int, ...] = (2, 4, 8, 8, 16, 16, 16, 16) + (32,) * 8
PATCH_ENCODERS = ("residual", "linear")
RESIDUAL_BLOCKS = 3


def parse_patch_list(text: str) -> Tuple[int, ...]:
    """'2,4,8' -> (2, 4, 8)"""
    try:
        lens = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ShapeError(f"Patch list must be comma-separated integers, got '{text}'") from None
    if not lens:
        raise ShapeError("Patch list is empty")
    return lens


@dataclass(frozen=True)
class GranularityConfig:
    patch_lens: Tuple[int, ...]
    timestamps: int

    def __post_init__(self):
        if not self.patch_lens:
            raise ShapeError("At least one patch length is required")
        for length in self.patch_lens:
            if length < 1:
                raise ShapeError(f"Patch length must be positive, got {length}")
            if length > self.timestamps:
                raise ShapeError(f"Patch length {length} exceeds window length T={self.timestamps}")

    @property
    def patch_counts(self) -> Tuple[int, ...]:
        return tuple(self.timestamps // length for length in self.patch_lens)

    @property
    def n_granularities(self) -> int:
        return len(self.patch_lens)

    @property
    def total_patches(self) -> int:
        return sum(self.patch_counts)

    def min_table_size(self) -> int:
        return max(self.patch_counts) + 1

    def default_table_size(self) -> int:
        return self.total_patches + 1


@dataclass
class GranularityBundle:
    """Tokens (B, N_i, D) and router (B, 1, D) of one granularity"""
    tokens: Tensor
    router: Tensor
    index: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def slice_patches(window: np.ndarray, patch_len: int) -> np.ndarray:
    """(..., T, C) -> (..., N, L, C); the T mod L tail is dropped."""
    timestamps, channels = window.shape[-2], window.shape[-1]
    if patch_len < 1 or patch_len > timestamps:
        raise ShapeError(f"Patch length {patch_len} invalid for window length T={timestamps}")
    count = timestamps // patch_len
    kept = window[..., :count * patch_len, :]
    return kept.reshape(window.shape[:-2] + (count, patch_len, channels))


def build_positional_table(size: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even columns sin, odd columns cos."""
    if d_model % 2:
        raise ShapeError(f"Positional table needs an even width, got D={d_model}")
    if size < 1:
        raise ShapeError(f"Positional table needs at least one row, got {size}")
    positions = np.arange(size, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((size, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    return table


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _add_conv(store, rng, prefix, fan_in, fan_out):
    store.add(f"{prefix}.w", glorot_uniform(rng, (fan_in, fan_out), store.dtype))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def _add_bn(store, prefix, width):
    store.add(f"{prefix}.gamma", np.ones(width))
    store.add(f"{prefix}.beta", np.zeros(width))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.running_var", np.ones(width))


def init_embedding_parameters(store: ParameterStore, granularity: GranularityConfig, channels: int,
                              d_model: int, table_size: int, patch_encoder: str,
                              rng: np.random.Generator) -> None:
    if patch_encoder not in PATCH_ENCODERS:
        raise ShapeError(f"Unknown patch encoder '{patch_encoder}'")
    if table_size < granularity.min_table_size():
        raise ShapeError(
            f"Positional table of {table_size} rows is too small; need at least "
            f"{granularity.min_table_size()} (max N_i + 1)"
        )
    store.add("embed.pos", build_positional_table(table_size, d_model), trainable=False)
    for i, length in enumerate(granularity.patch_lens):
        prefix = f"embed.{i}"
        if patch_encoder == "linear":
            _add_conv(store, rng, f"{prefix}.linear", length * channels, d_model)
        else:
            for b in range(1, RESIDUAL_BLOCKS + 1):
                block = f"{prefix}.block{b}"
                width_in = channels if b == 1 else d_model
                _add_conv(store, rng, f"{block}.conv1", width_in, d_model)
                _add_bn(store, f"{block}.bn1", d_model)
                _add_conv(store, rng, f"{block}.conv2", d_model, d_model)
                _add_bn(store, f"{block}.bn2", d_model)
                if b == 1:
                    _add_conv(store, rng, f"{block}.skip", channels, d_model)
                    _add_bn(store, f"{block}.bn_skip", d_model)
            store.add(f"{prefix}.norm.gamma", np.ones(d_model))
            store.add(f"{prefix}.norm.beta", np.zeros(d_model))
        store.add(f"{prefix}.granularity", np.zeros(d_model))


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _bn(x, store, prefix, training):
    return batch_norm(x, store[f"{prefix}.gamma"], store[f"{prefix}.beta"],
                      store.buffer(f"{prefix}.running_mean"), store.buffer(f"{prefix}.running_var"),
                      training)


def _conv(x, store, prefix):
    return pointwise_conv(x, store[f"{prefix}.w"], store[f"{prefix}.b"])


def residual_block(x: Tensor, store: ParameterStore, prefix: str, training: bool, project: bool) -> Tensor:
    """y = F(x) + skip(x), F = BN(conv(relu(BN(conv(x)))))."""
    h = relu(_bn(_conv(x, store, f"{prefix}.conv1"), store, f"{prefix}.bn1", training))
    h = _bn(_conv(h, store, f"{prefix}.conv2"), store, f"{prefix}.bn2", training)
    skip = _bn(_conv(x, store, f"{prefix}.skip"), store, f"{prefix}.bn_skip", training) if project else x
    return add(h, skip)


def encode_patches(patches, store: ParameterStore, index: int, training: bool,
                   patch_encoder: str = "residual") -> Tensor:
    """(B, N, L, C) patches -> (B, N, D) tokens for granularity `index`."""
    prefix = f"embed.{index}"
    if patch_encoder == "linear":
        flat = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
        flat = Tensor(flat.reshape(flat.shape[:-2] + (-1,)).astype(store.dtype))
        return _conv(flat, store, f"{prefix}.linear")
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=store.dtype))
    for b in range(1, RESIDUAL_BLOCKS + 1):
        x = residual_block(x, store, f"{prefix}.block{b}", training, project=(b == 1))
    x = layer_norm(x, store[f"{prefix}.norm.gamma"], store[f"{prefix}.norm.beta"])
    return mean(x, axis=-2)


def encode_patch(patch: np.ndarray, store: ParameterStore, index: int,
                 patch_encoder: str = "residual") -> Tensor:
    """One L x C patch -> one D-vector, inference-mode batch norm."""
    return encode_patches(np.asarray(patch)[None, None], store, index, False, patch_encoder)[0, 0]


def add_position_and_granularity(tokens: Tensor, store: ParameterStore, index: int) -> Tensor:
    count = tokens.shape[-2]
    table = store["embed.pos"]
    if count > table.shape[0] - 1:
        raise ShapeError(
            f"Positional table has {table.shape[0]} rows; granularity {index} needs "
            f"{count} token rows plus one router row"
        )
    return add(add(tokens, take(table, slice(0, count))), store[f"embed.{index}.granularity"])


def make_router(store: ParameterStore, index: int, n_patches: int) -> Tensor:
    """Positional row N_i plus the granularity embedding."""
    table = store["embed.pos"]
    if n_patches >= table.shape[0]:
        raise ShapeError(
            f"Router row {n_patches} is outside the positional table ({table.shape[0]} rows)"
        )
    return add(take(table, n_patches), store[f"embed.{index}.granularity"])


def embed(windows: np.ndarray, store: ParameterStore, granularity: GranularityConfig,
          training: bool, patch_encoder: str = "residual") -> List[GranularityBundle]:
    """(B, T, C) windows -> one bundle per granularity."""
    windows = np.asarray(windows)
    if windows.ndim != 3 or windows.shape[1] != granularity.timestamps:
        raise ShapeError(
            f"embed: expected (B, {granularity.timestamps}, C) windows, got {windows.shape}"
        )
    batch = windows.shape[0]
    ones = Tensor(np.ones((batch, 1, 1), dtype=store.dtype))
    bundles = []
    for i, length in enumerate(granularity.patch_lens):
        patches = slice_patches(windows, length)
        tokens = encode_patches(patches, store, i, training, patch_encoder)
        tokens = add_position_and_granularity(tokens, store, i)
        router = mul(ones, make_router(store, i, patches.shape[1]))
        bundles.append(GranularityBundle(tokens, router, i))
    return bundles
