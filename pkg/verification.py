#!/usr/bin/env python3
"""
Acceptance suites for the classifier.

    grads      finite-difference checks for every primitive and the tiny model
    isolation  granularities only talk to each other through their routers
    pairs      instrumented score counts match the two-stage formula
    metrics    ranking metrics agree with their brute-force oracles
    augment    augmentation statistics
    snapshot   eval logits of a fixed tiny model match the frozen reference

Each suite returns a list of CheckResult; `cli.py verify` prints them and
exits non-zero on any failure.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import numerics as nx
from attention import (
    AttentionParams,
    ScoreCounter,
    intra_stage,
    count_attention_pairs,
    encoder_layer,
    scale_mutation,
)
from augment import AugmentationSpec, apply, choose_spec, parse_spec
from cardioformer_model import ModelConfig, forward, init_parameters, loss
from embedding import DEFAULT_PATCH_LIST, GranularityBundle, GranularityConfig, embed
from metrics import auroc_binary, auroc_pairwise, average_precision, average_precision_bruteforce


SNAPSHOT_TOLERANCE = 1e-6

# Eval logits of snapshot_store() on snapshot_windows() with TINY_CONFIG, computed
# outside this package. A deliberate change to the forward pass must update them.
REFERENCE_LOGITS = np.array([
    [-0.34317105919515811, -0.95948431402604284],
    [-0.34269724339997654, -0.95827813678769891],
    [-0.34200460675417466, -0.95786374754925874],
    [-0.34130825686166932, -0.95837378862811629],
])

TINY_CONFIG = ModelConfig(
    patch_lens=(2, 4), d_model=8, n_layers=1, n_heads=2, d_ff=16,
    n_classes=2, timestamps=16, channels=2, dtype="float64",
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _weighted_sum(t: nx.Tensor) -> nx.Tensor:
    weights = np.cos(np.arange(t.data.size, dtype=np.float64)).reshape(t.shape)
    return nx.mean(nx.mul(t, nx.Tensor(weights)))


# ---------------------------------------------------------------------------
# grads
# ---------------------------------------------------------------------------

def _primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """op name -> (point, scalar function, tolerance)"""
    n = rng.normal
    labels = rng.integers(0, 3, size=4)
    mask_seed = int(rng.integers(1 << 30))
    return {
        "matmul": ({"a": n(size=(3, 4)), "b": n(size=(4, 5))},
                   lambda t: _weighted_sum(nx.matmul(t["a"], t["b"])), 1e-6),
        "matmul_transposed": ({"a": n(size=(2, 3, 4)), "b": n(size=(2, 5, 4))},
                              lambda t: _weighted_sum(nx.matmul(t["a"], t["b"], transpose_b=True)), 1e-6),
        "add": ({"a": n(size=(3, 4)), "b": n(size=(4,))},
                lambda t: _weighted_sum(nx.add(t["a"], t["b"])), 1e-6),
        "mul": ({"a": n(size=(3, 4)), "b": n(size=(3, 1))},
                lambda t: _weighted_sum(nx.mul(t["a"], t["b"])), 1e-6),
        "relu": (n(size=(4, 5)), lambda x: _weighted_sum(nx.relu(x)), 1e-6),
        "softmax": (n(size=(3, 5)), lambda x: _weighted_sum(nx.softmax(x, axis=-1)), 1e-6),
        "softmax_axis0": (n(size=(3, 5)), lambda x: _weighted_sum(nx.softmax(x, axis=0)), 1e-6),
        "layer_norm": ({"x": n(size=(3, 6)), "g": n(size=(6,)), "b": n(size=(6,))},
                       lambda t: _weighted_sum(nx.layer_norm(t["x"], t["g"], t["b"])), 1e-6),
        "batch_norm_train": ({"x": n(size=(4, 3, 5)), "g": n(size=(5,)), "b": n(size=(5,))},
                             lambda t: _weighted_sum(nx.batch_norm(t["x"], t["g"], t["b"], np.zeros(5),
                                                                   np.ones(5), training=True)), 1e-4),
        "batch_norm_eval": ({"x": n(size=(4, 3, 5)), "g": n(size=(5,)), "b": n(size=(5,))},
                            lambda t: _weighted_sum(nx.batch_norm(t["x"], t["g"], t["b"], np.full(5, 0.3),
                                                                  np.full(5, 2.0), training=False)), 1e-4),
        "pointwise_conv": ({"x": n(size=(2, 3, 4)), "w": n(size=(4, 5)), "b": n(size=(5,))},
                           lambda t: _weighted_sum(nx.pointwise_conv(t["x"], t["w"], t["b"])), 1e-6),
        "mean": (n(size=(3, 4, 5)), lambda x: _weighted_sum(nx.mean(x, axis=1)), 1e-6),
        "concat_slice": ({"a": n(size=(2, 3)), "b": n(size=(2, 4))},
                         lambda t: _weighted_sum(nx.take(nx.concat([t["a"], t["b"]], axis=1),
                                                         (slice(None), slice(1, 5)))), 1e-6),
        "dropout": (n(size=(4, 5)),
                    lambda x: _weighted_sum(nx.dropout(x, 0.3, np.random.default_rng(mask_seed), True)), 1e-6),
        "cross_entropy": (n(size=(4, 3)), lambda x: nx.cross_entropy(x, labels), 1e-6),
    }


def primitive_gradient_errors(trials: int = 10, seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(trials):
        for name, (point, fn, _) in _primitive_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), nx.grad_check(fn, point))
    return worst


def tiny_model_gradient_error(config: ModelConfig = TINY_CONFIG, seed: int = 0) -> float:
    """Loss gradient vs finite differences over every trainable parameter."""
    store = init_parameters(config)
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(2, config.timestamps, config.channels))
    labels = np.array([0, 1])
    point = {name: store[name].data.astype(np.float64).copy() for name in store.trainable_names()}

    def fn(tensors):
        return loss(store.with_tensors(tensors), config, windows, labels, mode="eval")

    return nx.grad_check(fn, point)


def run_grads_suite(trials: int = 10) -> List[CheckResult]:
    results = []
    tolerances = {name: tol for name, (_, _, tol) in _primitive_cases(np.random.default_rng(0)).items()}
    for name, err in primitive_gradient_errors(trials).items():
        results.append(CheckResult(f"grad {name}", err < tolerances[name], f"max rel err {err:.2e}"))
    err = tiny_model_gradient_error()
    results.append(CheckResult("grad tiny model", err < 1e-4, f"max rel err {err:.2e}"))
    return results


# ---------------------------------------------------------------------------
# isolation
# ---------------------------------------------------------------------------

ISOLATION_CONFIG = ModelConfig(
    patch_lens=(2, 4, 8), d_model=8, n_layers=2, n_heads=2, d_ff=16,
    n_classes=2, timestamps=16, channels=2, dtype="float64",
)


def _perturb(bundles: Sequence[GranularityBundle], j: int, rng) -> List[GranularityBundle]:
    out = list(bundles)
    tokens = bundles[j].tokens.data + rng.normal(size=bundles[j].tokens.shape)
    out[j] = GranularityBundle(nx.Tensor(tokens), bundles[j].router, j)
    return out


def run_isolation_suite(trials: int = 20, seed: int = 0) -> List[CheckResult]:
    config = ISOLATION_CONFIG
    store = init_parameters(config)
    layers = [AttentionParams.from_store(store, m, config.n_heads) for m in range(config.n_layers)]
    rng = np.random.default_rng(seed)
    isolated = routed = routed_tokens = True
    n = len(config.patch_lens)
    for _ in range(trials):
        windows = rng.normal(size=(1, config.timestamps, config.channels))
        base = embed(windows, store, config.granularity, training=False)
        j = int(rng.integers(n))
        moved = _perturb(base, j, rng)
        intra_a, intra_b = intra_stage(base, layers[0]), intra_stage(moved, layers[0])
        one_a, one_b = encoder_layer(base, layers[0]), encoder_layer(moved, layers[0])
        two_a, two_b = encoder_layer(one_a, layers[1]), encoder_layer(one_b, layers[1])
        for i in range(n):
            if i == j:
                continue
            isolated &= (np.array_equal(intra_a[i].tokens.data, intra_b[i].tokens.data)
                         and np.array_equal(intra_a[i].router.data, intra_b[i].router.data))
            routed &= np.max(np.abs(one_a[i].router.data - one_b[i].router.data)) > 1e-7
            routed_tokens &= np.max(np.abs(two_a[i].tokens.data - two_b[i].tokens.data)) > 1e-7
    return [
        CheckResult("intra-attention isolation", bool(isolated), f"{trials} trials, bit-exact"),
        CheckResult("router carries information after one layer", bool(routed), f"{trials} trials"),
        CheckResult("tokens receive information after two layers", bool(routed_tokens), f"{trials} trials"),
    ]


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

def instrumented_pairs(config: ModelConfig, seed: int = 0) -> int:
    store = init_parameters(config)
    counter = ScoreCounter()
    window = np.random.default_rng(seed).normal(size=(config.timestamps, config.channels))
    forward(window, store, config, "eval", counter=counter)
    return counter.pairs


def run_pairs_suite(configs: int = 50, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    mismatches = []
    for _ in range(configs):
        timestamps = int(rng.integers(4, 65))
        lens = tuple(int(x) for x in rng.integers(1, timestamps + 1, size=int(rng.integers(1, 6))))
        layers = int(rng.integers(1, 3))
        config = ModelConfig(patch_lens=lens, d_model=4, n_layers=layers, n_heads=2, d_ff=4,
                             n_classes=2, timestamps=timestamps, channels=1, dtype="float64")
        expected = count_attention_pairs(config.granularity, "two_stage") * layers
        actual = instrumented_pairs(config)
        if actual != expected:
            mismatches.append(f"T={timestamps} L={lens}: {actual} != {expected}")

    small = GranularityConfig((2, 4), 8)
    default = GranularityConfig(DEFAULT_PATCH_LIST, 250)
    ratio = count_attention_pairs(default, "joint") / count_attention_pairs(default, "two_stage")
    return [
        CheckResult("instrumented pair count", not mismatches,
                    f"{configs} configs" if not mismatches else "; ".join(mismatches[:3])),
        CheckResult("pair formula {2,4} T=8",
                    count_attention_pairs(small, "two_stage") == 38 and count_attention_pairs(small, "joint") == 64),
        CheckResult("joint/two-stage ratio at T=250", ratio > 2.4, f"ratio {ratio:.2f}"),
    ]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def run_metrics_suite(sets: int = 500, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_auc = worst_ap = 0.0
    for _ in range(sets):
        size = int(rng.integers(2, 201))
        positive = rng.random(size) < rng.uniform(0.1, 0.9)
        positive[0], positive[1] = True, False
        scores = np.round(rng.random(size), int(rng.integers(1, 4)))
        worst_auc = max(worst_auc, abs(auroc_binary(positive, scores) - auroc_pairwise(positive, scores)))
        worst_ap = max(worst_ap, abs(average_precision(positive, scores)
                                     - average_precision_bruteforce(positive, scores)))
    worked = auroc_binary([True, False, True, False], [0.9, 0.8, 0.3, 0.2])
    return [
        CheckResult("AUROC vs pairwise oracle", worst_auc <= 1e-9, f"max diff {worst_auc:.1e}"),
        CheckResult("AUPRC vs threshold oracle", worst_ap <= 1e-9, f"max diff {worst_ap:.1e}"),
        CheckResult("AUROC worked example", abs(worked - 0.75) < 1e-12, f"{worked:.4f}"),
    ]


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def run_augment_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    window = rng.normal(size=(250, 12)).astype(np.float32)

    masked = apply(window, parse_spec("temporal_mask0.1"), rng)
    zero_rows = int(np.sum(np.all(masked == 0, axis=1)))

    dropped = apply(window, parse_spec("drop0.5"), rng)
    fraction = float(np.mean(dropped == 0))
    sigma = np.sqrt(0.25 / window.size)

    shuffled = apply(window, AugmentationSpec("shuffle", 1.0), rng)
    same_multisets = np.array_equal(np.sort(shuffled, axis=1), np.sort(window, axis=1))

    restored = apply(window, AugmentationSpec("freq_mask", 0.0), rng)
    round_trip = float(np.max(np.abs(restored - window)))

    pool = [parse_spec(s) for s in ("jitter0.2", "scale0.2", "drop0.5")]
    counts = {str(s): 0 for s in pool}
    for _ in range(3000):
        counts[str(choose_spec(pool, rng))] += 1
    uniform = all(abs(c - 1000) <= 3 * np.sqrt(3000 * (1 / 3) * (2 / 3)) for c in counts.values())

    return [
        CheckResult("temporal_mask 0.1 zeroes 25 rows", zero_rows == 25, f"{zero_rows} rows"),
        CheckResult("drop 0.5 fraction", abs(fraction - 0.5) <= 3 * sigma, f"{fraction:.4f}"),
        CheckResult("shuffle keeps channel multisets", bool(same_multisets)),
        CheckResult("freq_mask 0 round trip", round_trip <= 1e-4, f"max err {round_trip:.1e}"),
        CheckResult("uniform pool selection", uniform, str(counts)),
    ]


# ---------------------------------------------------------------------------
# snapshot
# ---------------------------------------------------------------------------

def snapshot_windows(config: ModelConfig = TINY_CONFIG, count: int = 4) -> np.ndarray:
    """w[b, t, c] = sin(0.7 t + 1.3 c + 0.5 b)"""
    b, t, c = np.meshgrid(np.arange(count), np.arange(config.timestamps), np.arange(config.channels),
                          indexing="ij")
    return np.sin(0.7 * t + 1.3 * c + 0.5 * b)


def snapshot_store(config: ModelConfig = TINY_CONFIG) -> nx.ParameterStore:
    """
    Trainable tensors set to 0.5 * sin(0.9 k + 0.1 s), with k the flat index and
    s the sum of the character codes of the tensor name. The positional table and
    the batch-norm buffers keep their initial values.
    """
    store = init_parameters(config)
    for name in store.trainable_names():
        tensor = store[name]
        k = np.arange(tensor.data.size, dtype=np.float64)
        tensor.data[...] = (0.5 * np.sin(0.9 * k + 0.1 * sum(map(ord, name)))).reshape(tensor.shape)
    return store


def snapshot_logits(config: ModelConfig = TINY_CONFIG) -> np.ndarray:
    return forward(snapshot_windows(config), snapshot_store(config), config, "eval").data.astype(np.float64)


def load_reference(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return np.asarray(json.load(f)["logits"], dtype=np.float64)


def run_snapshot_suite(reference_path=None) -> List[CheckResult]:
    """Compare snapshot_logits() with REFERENCE_LOGITS, or with a JSON reference file."""
    if reference_path is None:
        recorded = REFERENCE_LOGITS
    else:
        path = Path(reference_path)
        if not path.exists():
            return [CheckResult("logit snapshot", False, f"reference {path} not found")]
        recorded = load_reference(path)
    current = snapshot_logits()
    diff = float(np.max(np.abs(current - recorded))) if current.shape == recorded.shape else float("inf")
    return [CheckResult("logit snapshot", diff <= SNAPSHOT_TOLERANCE, f"max diff {diff:.1e}")]


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    "grads": run_grads_suite,
    "isolation": run_isolation_suite,
    "pairs": run_pairs_suite,
    "metrics": run_metrics_suite,
    "augment": run_augment_suite,
    "snapshot": run_snapshot_suite,
}


def run_suites(names: Optional[Sequence[str]] = None, snapshot_path=None,
               mutate_attention_scale: Optional[float] = None, verbose: bool = False) -> List[CheckResult]:
    names = list(names) if names else list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"Unknown suite(s) {unknown}; choose from {list(SUITES)}")
    results: List[CheckResult] = []
    with scale_mutation(mutate_attention_scale if mutate_attention_scale is not None else 1.0):
        for name in names:
            if verbose:
                print(f"\n[VERIFY] {name}")
                print("-" * 60)
            suite = SUITES[name]
            found = suite(snapshot_path) if name == "snapshot" else suite()
            if verbose:
                for r in found:
                    print(f"  {r.line()}")
            results.extend(found)
    return results
