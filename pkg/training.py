"""
Training protocol: Adam, shuffled mini-batches, early stopping on validation
macro-F1, best-checkpoint selection and multi-seed runs over one fixed split.
"""

import time
from dataclasses import dataclass, field, fields
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from cardioformer_model import Checkpoint, ConfigError, ModelConfig, init_parameters, loss, predict_proba
from dataio import Sample, SplitAssignment
from metrics import MetricsReport, EvalRecord, confusion_metrics, evaluate_records, records_from_arrays
from numerics import ParameterStore, Tensor, cross_entropy, matmul, add


class TrainingError(ValueError):
    """Training cannot proceed on the given data."""


@dataclass
class TrainConfig:
    """Optimization settings (defaults: Adam at 1e-4, batch 16, up to 10 epochs, patience 3, seeds 41-43)"""
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 10
    patience: int = 3
    seeds: Tuple[int, ...] = (41, 42, 43)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 64

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.seeds:
            raise ConfigError("At least one seed is required")

    def to_dict(self) -> Dict:
        return {f.name: (list(getattr(self, f.name)) if f.name == "seeds" else getattr(self, f.name))
                for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {unknown}")
        return cls(**payload)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, store: ParameterStore) -> "AdamState":
        names = store.trainable_names()
        return cls(0, {n: np.zeros_like(store[n].data) for n in names},
                   {n: np.zeros_like(store[n].data) for n in names})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()})


@dataclass
class TrainState:
    epoch: int
    adam: AdamState
    best_val_f1: float = float("-inf")
    epochs_since_improvement: int = 0


def adam_step(store: ParameterStore, grads: Dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One Adam update in place; frozen tensors are never touched."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name in store.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        param = store[name]
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (param.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(param.dtype)


class EarlyStopping:
    """Stop after `patience` epochs without a strict score increase."""

    def __init__(self, patience: int = 3, verbose: bool = False):
        self.patience = patience
        self.verbose = verbose
        self.best = float("-inf")
        self.best_epoch = 0
        self.best_state = None
        self.wait = 0
        self.stopped_epoch = 0

    def __call__(self, epoch: int, score: float, snapshot: Callable[[], object]) -> bool:
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.best_state = snapshot()
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            if self.verbose:
                tqdm.write(f"[TRAIN] Early stopping at epoch {epoch}; best epoch {self.best_epoch} (F1 {self.best:.4f})")
            return True
        return False


def check_subject_independence(train: Sequence[Sample], val: Sequence[Sample],
                               test: Sequence[Sample] = ()) -> None:
    """Every pair of partitions must have disjoint subjects."""
    parts = {"train": train, "validation": val, "test": test}
    subjects = {name: {s.subject_id for s in samples} for name, samples in parts.items()}
    for a, b in combinations(parts, 2):
        overlap = sorted(subjects[a] & subjects[b])
        if overlap:
            shown = ", ".join(overlap[:5]) + (" ..." if len(overlap) > 5 else "")
            raise TrainingError(f"{a}/{b} subject overlap ({len(overlap)} subjects: {shown})")


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.window for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64))


def evaluate(store: ParameterStore, config: ModelConfig, samples: Sequence[Sample],
             batch_size: int = 64) -> Tuple[List[EvalRecord], Dict[str, float]]:
    """Eval-mode records and all six metrics."""
    windows, labels = _stack(samples)
    records = records_from_arrays(labels, predict_proba(store, config, windows, batch_size))
    return records, evaluate_records(records)


def train_loop(model_config: ModelConfig, train: Sequence[Sample], val: Sequence[Sample],
               train_config: TrainConfig, seed: int, verbose: bool = False
               ) -> Tuple[Checkpoint, List[Dict]]:
    """
    Train one seed and return the best-validation-F1 checkpoint plus the
    per-epoch history (epoch, train_loss, val_f1, val_accuracy, improved).
    """
    if not train or not val:
        raise TrainingError("Training and validation sets must be non-empty")
    check_subject_independence(train, val)
    windows, labels = _stack(train)
    if len(np.unique(labels)) < 2:
        raise TrainingError(f"degenerate label distribution: training labels are all {labels[0]}")
    if labels.max() >= model_config.n_classes:
        raise TrainingError(f"Training label {labels.max()} outside [0, {model_config.n_classes})")

    config = model_config.replace(seed=seed)
    store = init_parameters(config)
    adam = AdamState.zeros(store)
    stopper = EarlyStopping(train_config.patience, verbose)
    history: List[Dict] = []
    n = len(train)

    for epoch in range(1, train_config.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        starts = range(0, n, train_config.batch_size)
        losses = []
        for step, start in enumerate(tqdm(starts, desc=f"Seed {seed} epoch {epoch}", leave=False,
                                          disable=not verbose)):
            idx = order[start:start + train_config.batch_size]
            rng = np.random.default_rng([seed, epoch, step])
            store.zero_grad()
            batch_loss = loss(store, config, windows[idx], labels[idx], "train", rng)
            batch_loss.backward()
            adam_step(store, store.grads(), adam, train_config)
            losses.append(batch_loss.item() * len(idx))

        val_windows, val_labels = _stack(val)
        probs = predict_proba(store, config, val_windows, train_config.eval_batch_size)
        val_metrics = confusion_metrics(records_from_arrays(val_labels, probs))
        train_loss = float(np.sum(losses) / n)

        def snapshot(epoch=epoch, f1=val_metrics["f1"]):
            saved = adam.copy()
            return Checkpoint(config, store.copy(), epoch=epoch, best_val_f1=f1,
                              adam_step=saved.step, adam_m=saved.m, adam_v=saved.v)

        before = stopper.best
        stop = stopper(epoch, val_metrics["f1"], snapshot)
        history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_f1": val_metrics["f1"],
            "val_accuracy": val_metrics["accuracy"],
            "improved": val_metrics["f1"] > before,
        })
        if verbose:
            tqdm.write(f"[TRAIN] seed {seed} epoch {epoch}: loss {train_loss:.4f}, "
                       f"val F1 {val_metrics['f1']:.4f}, val acc {val_metrics['accuracy']:.4f}")
        if stop:
            break

    return stopper.best_state, history


@dataclass
class SeedResult:
    seed: int
    checkpoint: Checkpoint
    history: List[Dict]
    test_metrics: Dict[str, float]
    seconds: float = 0.0


@dataclass
class MultiSeedResult:
    report: MetricsReport
    runs: List[SeedResult]
    split: SplitAssignment


def multi_seed_run(model_config: ModelConfig, samples: Sequence[Sample], split: SplitAssignment,
                   train_config: TrainConfig, seeds: Optional[Sequence[int]] = None,
                   verbose: bool = False,
                   on_seed_done: Optional[Callable[[SeedResult], None]] = None) -> MultiSeedResult:
    """Train every seed on the same split and aggregate test metrics."""
    seeds = tuple(seeds) if seeds is not None else train_config.seeds
    if not seeds:
        raise TrainingError("At least one seed is required")
    parts = split.partition(samples)
    if not parts["test"]:
        raise TrainingError("Test partition is empty")
    check_subject_independence(parts["train"], parts["validation"], parts["test"])
    if verbose:
        print(f"[SPLIT] train {len(parts['train']):,} / val {len(parts['validation']):,} / "
              f"test {len(parts['test']):,} samples")

    runs = []
    for seed in seeds:
        started = time.perf_counter()
        ckpt, history = train_loop(model_config, parts["train"], parts["validation"], train_config, seed, verbose)
        _, test_metrics = evaluate(ckpt.store, ckpt.config, parts["test"], train_config.eval_batch_size)
        result = SeedResult(seed, ckpt, history, test_metrics, time.perf_counter() - started)
        runs.append(result)
        if verbose:
            print(f"[EVAL] seed {seed}: test accuracy {test_metrics['accuracy']:.4f}, "
                  f"AUROC {test_metrics['auroc']:.4f} (best epoch {ckpt.epoch}, {result.seconds:.1f}s)")
        if on_seed_done is not None:
            on_seed_done(result)

    report = MetricsReport.from_runs([r.test_metrics for r in runs])
    return MultiSeedResult(report, runs, split)


def fit_logistic_baseline(train: Sequence[Sample], test: Sequence[Sample], epochs: int = 30,
                          learning_rate: float = 1e-2, seed: int = 0, batch_size: int = 32) -> float:
    """Softmax regression on flattened windows; returns test accuracy."""
    x_train, y_train = _stack(train)
    x_test, y_test = _stack(test)
    x_train = x_train.reshape(len(x_train), -1)
    x_test = x_test.reshape(len(x_test), -1)
    classes = int(max(y_train.max(), y_test.max())) + 1

    store = ParameterStore("float32")
    store.add("w", np.zeros((x_train.shape[1], classes)))
    store.add("b", np.zeros(classes))
    state = AdamState.zeros(store)
    config = TrainConfig(learning_rate=learning_rate, batch_size=batch_size, max_epochs=epochs, patience=1)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            store.zero_grad()
            logits = add(matmul(Tensor(x_train[idx]), store["w"]), store["b"])
            cross_entropy(logits, y_train[idx]).backward()
            adam_step(store, store.grads(), state, config)
    logits = x_test @ store["w"].data + store["b"].data
    return float(np.mean(logits.argmax(axis=1) == y_test))
