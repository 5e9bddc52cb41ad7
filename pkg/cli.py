#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py datagen    --classes 4 --subjects 30 --per-subject 10 --out data/synth4
    python cli.py preprocess --data data/raw --out data/beats --mode heartbeat --pad-to 300
    python cli.py train      --data data/synth4 --seeds 41,42,43 --batch 16
    python cli.py eval       --checkpoint runs/run-.../checkpoint_seed41.ckpt --data data/synth4
    python cli.py verify     --suite grads --suite pairs

Configuration precedence for `train`: dataclass defaults < dataset preset
(matched by manifest name) < JSON file given with --config < flags.
The JSON file may hold "model", "train" and "split_seed"; anything else is
rejected.
"""

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from cardioformer_model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    __version__,
    check_compatible,
    load_checkpoint,
    save_checkpoint,
)
from dataio import (
    PARTITIONS,
    DatasetManifest,
    SplitAssignment,
    build_manifest,
    dataset_summary,
    generate_synthetic,
    read_dataset,
    split_from_manifest,
    subject_split,
    write_dataset,
)
from embedding import parse_patch_list
from metrics import MetricsReport
from preprocess import filter_consistent_subjects, preprocess_recordings, read_recordings
from training import SeedResult, TrainConfig, evaluate, multi_seed_run
from verification import run_suites


CONFIG_FILE_KEYS = {"model", "train", "split_seed"}
RUNS_ROOT = Path("runs")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _csv_ints(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _csv_strings(text: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def resolve_run_dir(out: Optional[str]) -> Path:
    """
    `--out` is used as-is when it does not exist or is empty; otherwise a
    fresh run-YYYYmmdd-HHMMSS directory is created inside it.
    """
    if out is not None:
        path = Path(out)
        if not path.exists() or (path.is_dir() and not any(path.iterdir())):
            path.mkdir(parents=True, exist_ok=True)
            return path
        root = path
    else:
        root = RUNS_ROOT
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = root / f"run-{stamp}"
    suffix = 1
    while candidate.exists():
        candidate = root / f"run-{stamp}-{suffix}"
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


def load_config_file(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON ({e})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    unknown = sorted(set(payload) - CONFIG_FILE_KEYS)
    if unknown:
        raise ConfigError(f"Unknown config file keys: {unknown} (allowed: {sorted(CONFIG_FILE_KEYS)})")
    return payload


def resolve_configs(args: argparse.Namespace, manifest: DatasetManifest) -> Tuple[ModelConfig, TrainConfig, int]:
    """Merge defaults, preset, config file and flags (in that order)."""
    model: Dict = {}
    train: Dict = {}
    preset = manifest.preset()
    if preset is not None:
        model["augmentations"] = list(preset["augmentations"])
        train["batch_size"] = preset["batch_size"]

    file_payload = load_config_file(args.config)
    model.update(file_payload.get("model", {}))
    train.update(file_payload.get("train", {}))
    split_seed = int(file_payload.get("split_seed", 0))

    flags = {
        "patch_lens": args.patch_list,
        "d_model": args.d_model,
        "n_layers": args.layers,
        "n_heads": args.heads,
        "d_ff": args.d_ff,
        "augmentations": args.augment,
    }
    model.update({k: v for k, v in flags.items() if v is not None})
    flags = {
        "learning_rate": args.lr,
        "batch_size": args.batch,
        "max_epochs": args.epochs,
        "patience": args.patience,
        "seeds": args.seeds,
    }
    train.update({k: v for k, v in flags.items() if v is not None})
    if args.split_seed is not None:
        split_seed = args.split_seed

    data_shape = {"n_classes": manifest.classes, "timestamps": manifest.timestamps, "channels": manifest.channels}
    for key, value in data_shape.items():
        if key in model and model[key] != value:
            raise ConfigError(f"Config sets {key}={model[key]} but the dataset has {value}")
    model.update(data_shape)

    if "patience" not in train and "max_epochs" in train:
        train["patience"] = min(TrainConfig.patience, train["max_epochs"])
    return ModelConfig.from_dict(model), TrainConfig.from_dict(train), split_seed


def resolve_split(manifest: DatasetManifest, split_seed: int, verbose: bool = False) -> SplitAssignment:
    """Manifest split keys win; otherwise a seeded subject split."""
    fixed = split_from_manifest(manifest)
    if fixed is not None:
        if verbose:
            print("[SPLIT] Using the split recorded in the manifest")
        return fixed
    split = subject_split(manifest, seed=split_seed)
    if verbose:
        sizes = split.sizes()
        print(f"[SPLIT] Subjects train {sizes[0]} / val {sizes[1]} / test {sizes[2]} (split seed {split_seed})")
    return split


def write_report(run_dir: Path, report: MetricsReport) -> None:
    (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    report.to_frame().to_csv(run_dir / "report.csv")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args: argparse.Namespace) -> int:
    manifest, samples = generate_synthetic(
        class_count=args.classes,
        subjects=args.subjects,
        samples_per_subject=args.per_subject,
        timestamps=args.timestamps,
        channels=args.channels,
        seed=args.seed,
        noise_std=args.noise,
        name=args.name,
    )
    write_dataset(args.out, manifest, samples, verbose=True)
    print(f"[DATA] {manifest.name}: K={manifest.classes}, T={manifest.timestamps}, C={manifest.channels}, "
          f"{len(manifest.subjects)} subjects")
    print(dataset_summary(manifest).to_string())
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    raw_manifest, recordings = read_recordings(args.data)
    print(f"[DATA] Loaded {len(recordings):,} recordings from {args.data} "
          f"({raw_manifest.sampling_rate_hz:g} Hz, C={raw_manifest.channels})")
    if args.filter_consistent:
        recordings = filter_consistent_subjects(recordings, verbose=True)
    samples, stats = preprocess_recordings(
        recordings, args.target_rate, args.mode, window_len=args.window, pad_to=args.pad_to, verbose=True,
    )
    if not samples:
        raise ValueError("Preprocessing produced no samples")
    manifest = build_manifest(args.name or raw_manifest.name, raw_manifest.classes, raw_manifest.channels,
                              stats["timestamps"], args.target_rate, samples)
    manifest.label_names = raw_manifest.label_names
    write_dataset(args.out, manifest, samples, verbose=True)
    print(f"[OK] {stats['recordings']} recordings -> {len(samples):,} samples of T={stats['timestamps']}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    manifest, samples = read_dataset(args.data, verbose=True)
    model_config, train_config, split_seed = resolve_configs(args, manifest)
    split = resolve_split(manifest, split_seed, verbose=True)
    run_dir = resolve_run_dir(args.out)
    print(f"[OK] Run directory: {run_dir}")

    run_config = {
        "code_version": __version__,
        "data": str(args.data),
        "dataset": manifest.name,
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "seeds": list(train_config.seeds),
        "split_seed": split_seed,
        "split": split.to_dict(),
    }
    with open(run_dir / "run_config.json", "w", encoding="utf-8") as f:
        json.dump(run_config, f, indent=2)

    def save_seed(result: SeedResult) -> None:
        result.checkpoint.meta.update({
            "seed": result.seed,
            "dataset": manifest.name,
            "split_seed": split_seed,
            "eval_batch_size": train_config.eval_batch_size,
        })
        save_checkpoint(run_dir / f"checkpoint_seed{result.seed}.ckpt", result.checkpoint)
        pd.DataFrame(result.history).to_json(run_dir / f"history_seed{result.seed}.jsonl",
                                             orient="records", lines=True)

    result = multi_seed_run(model_config, samples, split, train_config, verbose=True, on_seed_done=save_seed)
    write_report(run_dir, result.report)
    print()
    print(result.report.to_text())
    print(f"[OK] Report written to {run_dir / 'report.txt'}")
    return 0


def evaluate_checkpoints(checkpoints: Sequence[str], data: str, partition: str,
                         split_seed: Optional[int] = None, verbose: bool = False) -> MetricsReport:
    """Eval-mode metrics of each checkpoint on one partition, aggregated."""
    manifest, samples = read_dataset(data, verbose=verbose)
    runs: List[Dict[str, float]] = []
    for path in checkpoints:
        ckpt = load_checkpoint(path)
        check_compatible(ckpt, manifest.classes, manifest.timestamps, manifest.channels)
        if partition == "all":
            chosen = list(samples)
        else:
            seed = split_seed if split_seed is not None else int(ckpt.meta.get("split_seed", 0))
            chosen = resolve_split(manifest, seed, verbose=verbose).partition(samples)[partition]
        if not chosen:
            raise CheckpointError(f"Partition '{partition}' of {data} is empty")
        batch = int(ckpt.meta.get("eval_batch_size", 64))
        _, metrics = evaluate(ckpt.store, ckpt.config, chosen, batch)
        runs.append(metrics)
        if verbose:
            print(f"[EVAL] {path}: accuracy {metrics['accuracy']:.4f}, F1 {metrics['f1']:.4f}, "
                  f"AUROC {metrics['auroc']:.4f} on {len(chosen):,} samples")
    return MetricsReport.from_runs(runs)


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_checkpoints(args.checkpoint, args.data, args.split, args.split_seed, verbose=True)
    print()
    print(report.to_text())
    if args.out is not None:
        run_dir = resolve_run_dir(args.out)
        write_report(run_dir, report)
        print(f"[OK] Report written to {run_dir / 'report.txt'}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    names = [n for group in (args.suite or []) for n in _csv_strings(group)]
    results = run_suites(names or None, snapshot_path=args.snapshot,
                         mutate_attention_scale=args.mutate_attention_scale, verbose=True)
    failed = [r for r in results if not r.passed]
    print()
    print("=" * 60)
    print(f"[{'FAIL' if failed else 'PASS'}] {len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        print(f"  {r.line()}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multi-granularity transformer for multivariate ECG classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="Write a synthetic pulse-train dataset.")
    p.add_argument("--classes", type=int, default=4, help="Number of classes K (>= 2).")
    p.add_argument("--subjects", type=int, default=30, help="Number of subjects.")
    p.add_argument("--per-subject", type=int, default=10, help="Samples per subject.")
    p.add_argument("--timestamps", type=int, default=250, help="Window length T.")
    p.add_argument("--channels", type=int, default=12, help="Channel count C.")
    p.add_argument("--noise", type=float, default=0.05, help="Gaussian noise std.")
    p.add_argument("--seed", type=int, default=0, help="Generator seed.")
    p.add_argument("--name", default="synthetic", help="Dataset name stored in the manifest.")
    p.add_argument("--out", required=True, help="Output dataset directory.")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("preprocess", help="Resample, standardize and segment raw recordings.")
    p.add_argument("--data", required=True, help="Raw recording directory.")
    p.add_argument("--out", required=True, help="Output dataset directory.")
    p.add_argument("--mode", required=True, choices=["heartbeat", "window"], help="Segmentation mode.")
    p.add_argument("--window", type=int, default=None, help="Window length for --mode window.")
    p.add_argument("--pad-to", type=int, default=None, help="Beat length for --mode heartbeat (default: fit all).")
    p.add_argument("--target-rate", type=float, default=250.0, help="Target sampling rate in Hz.")
    p.add_argument("--filter-consistent", action="store_true", help="Drop subjects with conflicting labels.")
    p.add_argument("--name", default=None, help="Dataset name (default: raw manifest name).")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="Multi-seed training on one subject-independent split.")
    p.add_argument("--data", required=True, help="Dataset directory.")
    p.add_argument("--out", default=None, help="Run directory (fresh timestamped one if not empty).")
    p.add_argument("--config", default=None, help="JSON file with 'model', 'train' and 'split_seed'.")
    p.add_argument("--seeds", type=_csv_ints, default=None, help="Comma-separated seeds, e.g. 41,42,43.")
    p.add_argument("--batch", type=int, default=None, help="Mini-batch size.")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate.")
    p.add_argument("--epochs", type=int, default=None, help="Maximum epochs.")
    p.add_argument("--patience", type=int, default=None, help="Early-stopping patience.")
    p.add_argument("--patch-list", type=parse_patch_list, default=None, help="Patch lengths, e.g. 2,4,8.")
    p.add_argument("--d-model", type=int, default=None, help="Token width D.")
    p.add_argument("--layers", type=int, default=None, help="Encoder layers M.")
    p.add_argument("--heads", type=int, default=None, help="Attention heads H.")
    p.add_argument("--d-ff", type=int, default=None, help="Feed-forward width.")
    p.add_argument("--augment", type=_csv_strings, default=None, help="Augmentation pool, e.g. jitter0.2,drop0.5.")
    p.add_argument("--split-seed", type=int, default=None, help="Seed of the subject split.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate checkpoint(s) on a dataset partition.")
    p.add_argument("--checkpoint", required=True, action="append", help="Checkpoint file (repeatable).")
    p.add_argument("--data", required=True, help="Dataset directory.")
    p.add_argument("--split", default="test", choices=list(PARTITIONS) + ["all"], help="Partition to evaluate.")
    p.add_argument("--split-seed", type=int, default=None, help="Override the split seed stored in the checkpoint.")
    p.add_argument("--out", default=None, help="Optional directory for report.txt / report.csv.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="Run the acceptance suites.")
    p.add_argument("--suite", action="append", default=None,
                   help="Suite name(s): grads, isolation, pairs, metrics, augment, snapshot (repeatable).")
    p.add_argument("--mutate-attention-scale", type=float, default=None,
                   help="Multiply the attention score scale (checks that the suites catch it).")
    p.add_argument("--snapshot", default=None, help="Reference logits JSON (default: the built-in reference).")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
