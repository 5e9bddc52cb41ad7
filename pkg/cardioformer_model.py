"""
Cardioformer ECG classifier
Multi-granularity patch embedding -> M two-stage router attention layers ->
pooled per-granularity representation -> K-way affine head.

Also owns parameter initialization and the checkpoint file format.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from attention import AttentionParams, ScoreCounter, encoder_layer, init_attention_parameters
from augment import AugmentationError, AugmentationSpec, parse_pool, select_and_apply
from embedding import (
    DEFAULT_PATCH_LIST,
    PATCH_ENCODERS,
    GranularityBundle,
    GranularityConfig,
    embed,
    init_embedding_parameters,
)
from numerics import (
    DTYPES,
    NonFiniteError,
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    glorot_uniform,
    matmul,
    mean,
    take,
)


__version__ = "0.1.0"
CHECKPOINT_FORMAT_VERSION = 2
HEAD_POOLING = ("mean", "flatten")


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class CheckpointError(ValueError):
    """Checkpoint cannot be written, read or used for the requested data."""


@dataclass
class ModelConfig:
    """
    Architecture hyperparameters.

    Args:
        patch_lens: patch length per granularity (repeats allowed)
        d_model: token width D
        n_layers: encoder layers M
        n_heads: attention heads H (must divide D)
        d_ff: feed-forward hidden width
        n_classes: K
        timestamps / channels: window shape T x C
        augmentations: training-time pool, e.g. ("jitter0.2", "scale0.2", "drop0.5")
        head_pooling: "mean" pools tokens per granularity, "flatten" keeps every token
        include_routers: append each granularity's router to the representation
        pos_table_size: rows G of the positional table (default sum N_i + 1)
        patch_encoder: "residual" or "linear"
    """
    patch_lens: Tuple[int, ...] = DEFAULT_PATCH_LIST
    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int = 256
    n_classes: int = 2
    timestamps: int = 250
    channels: int = 12
    augmentations: Tuple[str, ...] = ("none",)
    head_pooling: str = "mean"
    include_routers: bool = False
    pos_table_size: Optional[int] = None
    patch_encoder: str = "residual"
    attn_dropout: float = 0.0
    seed: int = 41
    dtype: str = "float32"

    def __post_init__(self):
        self.patch_lens = tuple(int(x) for x in self.patch_lens)
        self.augmentations = tuple(str(x) for x in self.augmentations)
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "timestamps", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for the sinusoidal table, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_pooling not in HEAD_POOLING:
            raise ConfigError(f"head_pooling must be one of {HEAD_POOLING}, got '{self.head_pooling}'")
        if self.patch_encoder not in PATCH_ENCODERS:
            raise ConfigError(f"patch_encoder must be one of {PATCH_ENCODERS}, got '{self.patch_encoder}'")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got '{self.dtype}'")
        try:
            granularity = self.granularity
            self.augmentation_pool
        except (ShapeError, AugmentationError) as e:
            raise ConfigError(str(e)) from None
        if self.pos_table_size is None:
            self.pos_table_size = granularity.default_table_size()
        if self.pos_table_size < granularity.min_table_size():
            raise ConfigError(
                f"pos_table_size={self.pos_table_size} < max N_i + 1 = {granularity.min_table_size()}"
            )

    @property
    def granularity(self) -> GranularityConfig:
        return GranularityConfig(self.patch_lens, self.timestamps)

    @property
    def augmentation_pool(self) -> List[AugmentationSpec]:
        return parse_pool(self.augmentations)

    @property
    def head_inputs(self) -> int:
        g = self.granularity
        width = g.n_granularities * self.d_model if self.head_pooling == "mean" else g.total_patches * self.d_model
        if self.include_routers:
            width += g.n_granularities * self.d_model
        return width

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["patch_lens"] = list(self.patch_lens)
        out["augmentations"] = list(self.augmentations)
        return out

    @classmethod
    def from_dict(cls, payload: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {unknown}")
        return cls(**payload)

    def replace(self, **changes) -> "ModelConfig":
        if "patch_lens" in changes and "pos_table_size" not in changes:
            changes["pos_table_size"] = None
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_parameters(config: ModelConfig, seed: Optional[int] = None) -> ParameterStore:
    """Glorot-uniform weights, zero biases, unit BN scale, zero granularity embeddings."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ParameterStore(config.dtype)
    init_embedding_parameters(store, config.granularity, config.channels, config.d_model,
                              config.pos_table_size, config.patch_encoder, rng)
    for layer in range(config.n_layers):
        init_attention_parameters(store, layer, config.d_model, config.d_ff, rng)
    store.add("head.w", glorot_uniform(rng, (config.head_inputs, config.n_classes), store.dtype))
    store.add("head.b", np.zeros(config.n_classes))
    return store


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def representation(bundles: Sequence[GranularityBundle], config: ModelConfig) -> Tensor:
    """Concatenate per-granularity summaries into h of shape (B, head_inputs)."""
    pieces = []
    for bundle in bundles:
        if config.head_pooling == "mean":
            pieces.append(mean(bundle.tokens, axis=-2))
        else:
            pieces.extend(take(bundle.tokens, (slice(None), j)) for j in range(bundle.n_tokens))
        if config.include_routers:
            pieces.append(take(bundle.router, (slice(None), 0)))
    return pieces[0] if len(pieces) == 1 else concat(pieces, axis=-1)


def _prepare_windows(windows, config: ModelConfig, mode: str,
                     rng: Optional[np.random.Generator]) -> np.ndarray:
    windows = np.asarray(windows)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3 or windows.shape[1:] != (config.timestamps, config.channels):
        raise ShapeError(
            f"forward: expected window(s) of shape ({config.timestamps}, {config.channels}), "
            f"got {windows.shape}"
        )
    if mode == "train":
        pool = config.augmentation_pool
        windows = np.stack([select_and_apply(w, pool, rng, True) for w in windows])
    return windows.astype(DTYPES[config.dtype], copy=False)


def forward(windows, store: ParameterStore, config: ModelConfig, mode: str = "eval",
            rng: Optional[np.random.Generator] = None,
            counter: Optional[ScoreCounter] = None) -> Tensor:
    """
    Logits for one (T, C) window -> (K,) or a (B, T, C) batch -> (B, K).

    Train mode samples one augmentation per window and normalizes with batch
    statistics; eval mode is a pure function of (windows, store).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    single = np.ndim(windows) == 2
    training = mode == "train"
    if training and rng is None:
        rng = np.random.default_rng(config.seed)
    batch = _prepare_windows(windows, config, mode, rng)

    try:
        bundles = embed(batch, store, config.granularity, training, config.patch_encoder)
    except NonFiniteError as e:
        raise NonFiniteError(f"embedding: {e}") from None
    for layer in range(config.n_layers):
        params = AttentionParams.from_store(store, layer, config.n_heads, config.attn_dropout)
        try:
            bundles = encoder_layer(bundles, params, counter, rng, training)
        except NonFiniteError as e:
            raise NonFiniteError(f"encoder layer {layer}: {e}") from None
    try:
        logits = add(matmul(representation(bundles, config), store["head.w"]), store["head.b"])
    except NonFiniteError as e:
        raise NonFiniteError(f"classification head: {e}") from None
    return take(logits, 0) if single else logits


def loss(store: ParameterStore, config: ModelConfig, windows, labels: Sequence[int], mode: str = "train",
         rng: Optional[np.random.Generator] = None) -> Tensor:
    return cross_entropy(forward(windows, store, config, mode, rng), labels)


def predict_proba(store: ParameterStore, config: ModelConfig, windows, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities, (n, K) float64."""
    windows = np.asarray(windows)
    if windows.ndim == 2:
        windows = windows[None]
    out = []
    for start in range(0, len(windows), batch_size):
        logits = forward(windows[start:start + batch_size], store, config, "eval").data.astype(np.float64)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        out.append(shifted / shifted.sum(axis=1, keepdims=True))
    if not out:
        return np.zeros((0, config.n_classes))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

# little-endian payload per compute dtype; the header records which one
PAYLOAD_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: ModelConfig
    store: ParameterStore
    epoch: int = 0
    best_val_f1: Optional[float] = None
    adam_step: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)


def _tensor_directory(ckpt: Checkpoint) -> List[Tuple[str, str, np.ndarray]]:
    entries = []
    for name, tensor in ckpt.store.tensors.items():
        entries.append(("frozen" if name in ckpt.store.frozen else "param", name, tensor.data))
    for name, buf in ckpt.store.buffers.items():
        entries.append(("buffer", name, buf))
    for name, arr in ckpt.adam_m.items():
        entries.append(("adam_m", name, arr))
    for name, arr in ckpt.adam_v.items():
        entries.append(("adam_v", name, arr))
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """
    Write `<header length>\\n<UTF-8 JSON header><payloads>`.

    The header holds the config, training metadata and a directory of
    (kind, name, shape, offset) for every tensor.
    Payloads keep the store's dtype, so a reload is bit-exact.
    """
    payload_dtype = PAYLOAD_DTYPES[ckpt.store.dtype.name]
    directory, payloads, offset = [], [], 0
    for kind, name, arr in _tensor_directory(ckpt):
        raw = np.ascontiguousarray(arr, dtype=payload_dtype).tobytes()
        directory.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "code_version": __version__,
        "config": ckpt.config.to_dict(),
        "payload_dtype": ckpt.store.dtype.name,
        "meta": {"epoch": ckpt.epoch, "best_val_f1": ckpt.best_val_f1,
                 "adam_step": ckpt.adam_step, **ckpt.meta},
        "tensors": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(f"{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found")
    data = path.read_bytes()
    newline = data.find(b"\n", 0, 32)
    if newline <= 0 or not data[:newline].isdigit():
        raise CheckpointError(f"Checkpoint {path}: malformed header")
    header_len = int(data[:newline])
    base = newline + 1 + header_len
    if base > len(data):
        raise CheckpointError(f"Checkpoint {path}: truncated header")
    try:
        header = json.loads(data[newline + 1:base].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint {path}: unreadable header ({e})") from None
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path}: format version {header.get('format_version')} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
        payload_name = header["payload_dtype"]
    except KeyError as e:
        raise CheckpointError(f"Checkpoint {path}: header has no {e} entry") from None
    if payload_name not in PAYLOAD_DTYPES:
        raise CheckpointError(f"Checkpoint {path}: unsupported payload dtype '{payload_name}'")
    payload_dtype = PAYLOAD_DTYPES[payload_name]

    arrays: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "frozen": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for entry in directory:
        if entry.get("kind") not in arrays:
            raise CheckpointError(f"Checkpoint {path}: unknown tensor kind '{entry.get('kind')}'")
        if not {"name", "shape", "offset"} <= set(entry):
            raise CheckpointError(f"Checkpoint {path}: incomplete tensor entry {entry}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + int(entry["offset"])
        end = start + count * payload_dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"Checkpoint {path}: truncated payload for tensor '{entry['name']}'")
        values = np.frombuffer(data[start:end], dtype=payload_dtype).reshape(shape)
        arrays[entry["kind"]][entry["name"]] = values.astype(DTYPES[config.dtype])

    expected = init_parameters(config)
    store = ParameterStore(config.dtype)
    for name, tensor in expected.tensors.items():
        kind = "frozen" if name in expected.frozen else "param"
        if name not in arrays[kind]:
            raise CheckpointError(f"Checkpoint {path}: missing tensor '{name}'")
        values = arrays[kind][name]
        if values.shape != tensor.shape:
            raise CheckpointError(
                f"Checkpoint {path}: shape mismatch for '{name}': file {values.shape}, model {tensor.shape}"
            )
        store.add(name, values, trainable=kind == "param")
    for name, buf in expected.buffers.items():
        if name not in arrays["buffer"]:
            raise CheckpointError(f"Checkpoint {path}: missing buffer '{name}'")
        if arrays["buffer"][name].shape != buf.shape:
            raise CheckpointError(f"Checkpoint {path}: shape mismatch for buffer '{name}'")
        store.add_buffer(name, arrays["buffer"][name])

    meta = dict(header.get("meta", {}))
    return Checkpoint(
        config=config,
        store=store,
        epoch=int(meta.pop("epoch", 0)),
        best_val_f1=meta.pop("best_val_f1", None),
        adam_step=int(meta.pop("adam_step", 0)),
        adam_m=arrays["adam_m"],
        adam_v=arrays["adam_v"],
        meta={"code_version": header.get("code_version"), **meta},
    )


def check_compatible(ckpt: Checkpoint, classes: int, timestamps: int, channels: int) -> None:
    """Refuse to evaluate a checkpoint on data of another shape."""
    cfg = ckpt.config
    if cfg.n_classes != classes:
        raise CheckpointError(f"class count mismatch: checkpoint has K={cfg.n_classes}, data has K={classes}")
    if cfg.timestamps != timestamps or cfg.channels != channels:
        raise CheckpointError(
            f"window shape mismatch: checkpoint expects ({cfg.timestamps}, {cfg.channels}), "
            f"data has ({timestamps}, {channels})"
        )
