"""
ECG dataset container, subject-independent splits and a synthetic generator.

On-disk layout of a dataset directory:

    manifest.json         name, classes, channels, timestamps, sampling_rate_hz,
                          samples: [{id, subject, label, file[, split]}]
    samples/<id>.f32      raw little-endian float32, T rows of C values, no header

The synthetic generator produces class-specific Gaussian pulse trains so every
downstream mechanism can be exercised without clinical data.
"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd


PARTITIONS = ("train", "validation", "test")
MANIFEST_NAME = "manifest.json"
SAMPLE_DTYPE = np.dtype("<f4")

# Reference shapes, batch sizes and augmentation pools for known ECG datasets;
# selected when a manifest name matches.
DATASET_PRESETS: Dict[str, Dict] = {
    "ptb": {"classes": 2, "channels": 15, "timestamps": 300, "sampling_rate_hz": 250,
            "batch_size": 32, "augmentations": ["drop0.5"]},
    "ptb-xl": {"classes": 5, "channels": 12, "timestamps": 250, "sampling_rate_hz": 250,
               "batch_size": 16, "augmentations": ["jitter0.2", "scale0.2", "drop0.5"]},
    "mimic-iv": {"classes": 4, "channels": 12, "timestamps": 250, "sampling_rate_hz": 250,
                 "batch_size": 16, "augmentations": ["jitter0.2", "scale0.2", "drop0.5"]},
}


class DatasetError(ValueError):
    """Malformed manifest, missing file or bad sample contents."""


@dataclass
class Sample:
    """One preprocessed window with its label and subject"""
    sample_id: str
    subject_id: str
    label: int
    window: np.ndarray  # (T, C) float32


@dataclass
class ManifestEntry:
    sample_id: str
    subject_id: str
    label: int
    file: str
    split: Optional[str] = None
    timestamps: Optional[int] = None  # raw recordings only

    def to_dict(self) -> Dict:
        out = {"id": self.sample_id, "subject": self.subject_id,
               "label": self.label, "file": self.file}
        if self.split is not None:
            out["split"] = self.split
        if self.timestamps is not None:
            out["timestamps"] = self.timestamps
        return out


@dataclass
class DatasetManifest:
    """Dataset-level dimensions plus one entry per sample file"""
    name: str
    classes: int
    channels: int
    timestamps: int
    sampling_rate_hz: float
    entries: List[ManifestEntry] = field(default_factory=list)
    label_names: Optional[List[str]] = None

    def validate(self) -> None:
        if self.classes < 1 or self.channels < 1 or self.timestamps < 1:
            raise DatasetError(
                f"Manifest '{self.name}' has invalid dimensions "
                f"K={self.classes}, C={self.channels}, T={self.timestamps}"
            )
        if self.sampling_rate_hz <= 0:
            raise DatasetError(f"Manifest '{self.name}' has non-positive sampling rate")
        seen = set()
        for entry in self.entries:
            if not entry.sample_id:
                raise DatasetError("Manifest entry without an id")
            if entry.sample_id in seen:
                raise DatasetError(f"Duplicate sample id '{entry.sample_id}'")
            seen.add(entry.sample_id)
            if not entry.subject_id:
                raise DatasetError(f"Sample '{entry.sample_id}' has an empty subject id")
            if not 0 <= entry.label < self.classes:
                raise DatasetError(
                    f"Sample '{entry.sample_id}' label {entry.label} outside [0, {self.classes})"
                )
            if entry.split is not None and entry.split not in PARTITIONS:
                raise DatasetError(f"Sample '{entry.sample_id}' has unknown split '{entry.split}'")

    @property
    def subjects(self) -> List[str]:
        return sorted({e.subject_id for e in self.entries})

    def preset(self) -> Optional[Dict]:
        return DATASET_PRESETS.get(self.name.lower())

    def to_dict(self) -> Dict:
        out = {
            "name": self.name,
            "classes": self.classes,
            "channels": self.channels,
            "timestamps": self.timestamps,
            "sampling_rate_hz": self.sampling_rate_hz,
            "samples": [e.to_dict() for e in self.entries],
        }
        if self.label_names is not None:
            out["label_names"] = list(self.label_names)
        return out

    @classmethod
    def from_dict(cls, payload: Dict) -> "DatasetManifest":
        required = ["name", "classes", "channels", "timestamps", "sampling_rate_hz", "samples"]
        missing = [k for k in required if k not in payload]
        if missing:
            raise DatasetError(f"Manifest missing keys: {missing}")
        entries = []
        for raw in payload["samples"]:
            missing = [k for k in ("id", "subject", "label", "file") if k not in raw]
            if missing:
                raise DatasetError(f"Manifest sample entry {raw.get('id', '?')!r} missing keys: {missing}")
            entries.append(ManifestEntry(
                sample_id=str(raw["id"]),
                subject_id=str(raw["subject"]),
                label=int(raw["label"]),
                file=str(raw["file"]),
                split=raw.get("split"),
                timestamps=int(raw["timestamps"]) if "timestamps" in raw else None,
            ))
        manifest = cls(
            name=str(payload["name"]),
            classes=int(payload["classes"]),
            channels=int(payload["channels"]),
            timestamps=int(payload["timestamps"]),
            sampling_rate_hz=float(payload["sampling_rate_hz"]),
            entries=entries,
            label_names=payload.get("label_names"),
        )
        manifest.validate()
        return manifest


@dataclass
class SplitAssignment:
    """subject_id -> partition name"""
    assignment: Dict[str, str]

    def partition_of(self, subject_id: str) -> str:
        try:
            return self.assignment[subject_id]
        except KeyError:
            raise DatasetError(f"Subject '{subject_id}' has no split assignment") from None

    def subjects(self, partition: str) -> List[str]:
        return sorted(s for s, p in self.assignment.items() if p == partition)

    def sizes(self) -> Tuple[int, int, int]:
        return tuple(len(self.subjects(p)) for p in PARTITIONS)

    def partition(self, samples: Sequence[Sample]) -> Dict[str, List[Sample]]:
        parts: Dict[str, List[Sample]] = {p: [] for p in PARTITIONS}
        for sample in samples:
            parts[self.partition_of(sample.subject_id)].append(sample)
        return parts

    def to_dict(self) -> Dict[str, List[str]]:
        return {p: self.subjects(p) for p in PARTITIONS}


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def subject_split(manifest: DatasetManifest, fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> SplitAssignment:
    """
    Subject-independent train/validation/test assignment.

    Subjects are shuffled by seed and cut at the floored cumulative fractions;
    any shortfall goes to train. An empty partition borrows one subject from
    the largest partition.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise DatasetError(f"Split fractions must be three non-negative values summing to 1, got {fractions}")
    subjects = manifest.subjects
    if len(subjects) < len(PARTITIONS):
        raise DatasetError(f"Need at least {len(PARTITIONS)} subjects to split, got {len(subjects)}")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    total = len(order)
    bounds = [int(math.floor(sum(fractions[:k + 1]) * total + 1e-9)) for k in range(3)]
    sizes = [bounds[0], bounds[1] - bounds[0], bounds[2] - bounds[1]]
    sizes[0] += total - sum(sizes)

    while min(sizes) == 0:
        donor = sizes.index(max(sizes))
        sizes[donor] -= 1
        sizes[sizes.index(0)] += 1

    assignment = {}
    start = 0
    for partition, size in zip(PARTITIONS, sizes):
        for subject in order[start:start + size]:
            assignment[subject] = partition
        start += size
    return SplitAssignment(assignment)


def split_from_manifest(manifest: DatasetManifest) -> Optional[SplitAssignment]:
    """Fixed split carried by the manifest entries, or None if there is none."""
    tagged = [e for e in manifest.entries if e.split is not None]
    if not tagged:
        return None
    if len(tagged) != len(manifest.entries):
        raise DatasetError("Manifest split keys must be present on every sample or on none")
    return FixedSplit({e.sample_id: e.split for e in manifest.entries},
                      {e.subject_id: e.split for e in manifest.entries})


class FixedSplit(SplitAssignment):
    """Split taken verbatim from manifest entries; partitions by sample id."""

    def __init__(self, by_sample: Dict[str, str], by_subject: Dict[str, str]):
        super().__init__(by_subject)
        self.by_sample = by_sample

    def partition(self, samples: Sequence[Sample]) -> Dict[str, List[Sample]]:
        parts: Dict[str, List[Sample]] = {p: [] for p in PARTITIONS}
        for sample in samples:
            parts[self.by_sample[sample.sample_id]].append(sample)
        return parts


# ---------------------------------------------------------------------------
# Reading / writing
# ---------------------------------------------------------------------------

def _write_json_atomic(path: Path, payload: Dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"No {MANIFEST_NAME} in {root}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"Manifest {path} is not valid JSON: {e}") from None
    return DatasetManifest.from_dict(payload)


def read_array(root, entry: ManifestEntry, rows: int, channels: int) -> np.ndarray:
    path = Path(root) / entry.file
    if not path.exists():
        raise DatasetError(f"Sample '{entry.sample_id}': file {entry.file} not found")
    raw = path.read_bytes()
    expected = SAMPLE_DTYPE.itemsize * rows * channels
    if len(raw) != expected:
        raise DatasetError(
            f"Sample '{entry.sample_id}': expected {rows}x{channels} values "
            f"({expected} bytes), file has {len(raw)} bytes"
        )
    values = np.frombuffer(raw, dtype=SAMPLE_DTYPE).reshape(rows, channels).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"Sample '{entry.sample_id}': contains non-finite values")
    return values


def write_array(root, relative: str, values: np.ndarray) -> None:
    path = Path(root) / relative
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype=SAMPLE_DTYPE).tobytes())


def read_dataset(root, verbose: bool = False) -> Tuple[DatasetManifest, List[Sample]]:
    manifest = read_manifest(root)
    samples = []
    for entry in manifest.entries:
        window = read_array(root, entry, manifest.timestamps, manifest.channels)
        samples.append(Sample(entry.sample_id, entry.subject_id, entry.label, window))
    if verbose:
        print(f"[DATA] Loaded {len(samples):,} samples from {root} "
              f"(K={manifest.classes}, T={manifest.timestamps}, C={manifest.channels})")
    return manifest, samples


def write_dataset(root, manifest: DatasetManifest, samples: Sequence[Sample], verbose: bool = False) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {e.sample_id: e for e in manifest.entries}
    for sample in samples:
        if sample.window.shape != (manifest.timestamps, manifest.channels):
            raise DatasetError(
                f"Sample '{sample.sample_id}': window shape {sample.window.shape} does not match "
                f"manifest ({manifest.timestamps}, {manifest.channels})"
            )
        if not np.all(np.isfinite(sample.window)):
            raise DatasetError(f"Sample '{sample.sample_id}': contains non-finite values")
        entry = by_id.get(sample.sample_id)
        if entry is None:
            raise DatasetError(f"Sample '{sample.sample_id}' is not listed in the manifest")
        write_array(root, entry.file, sample.window)
    _write_json_atomic(root / MANIFEST_NAME, manifest.to_dict())
    if verbose:
        print(f"[OK] Wrote {len(samples):,} samples to {root}")


def build_manifest(name: str, classes: int, channels: int, timestamps: int, sampling_rate_hz: float,
                   samples: Sequence[Sample], splits: Optional[Dict[str, str]] = None) -> DatasetManifest:
    entries = [
        ManifestEntry(s.sample_id, s.subject_id, int(s.label), f"samples/{s.sample_id}.f32",
                      split=(splits or {}).get(s.sample_id))
        for s in samples
    ]
    manifest = DatasetManifest(name, classes, channels, timestamps, sampling_rate_hz, entries)
    manifest.validate()
    return manifest


def dataset_summary(manifest: DatasetManifest) -> pd.DataFrame:
    """Per-class sample and subject counts."""
    df = pd.DataFrame([{"label": e.label, "subject": e.subject_id} for e in manifest.entries],
                      columns=["label", "subject"])
    summary = df.groupby("label").agg(samples=("subject", "size"), subjects=("subject", "nunique"))
    summary = summary.reindex(range(manifest.classes), fill_value=0)
    if manifest.label_names:
        summary.insert(0, "name", manifest.label_names[:manifest.classes])
    return summary


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

CHANNEL_LAG = 2  # samples of phase lag added per channel


def class_morphology(label: int, timestamps: int) -> Dict[str, float]:
    """Pulse width, amplitude and period for one class."""
    return {
        "width": 4 + 2 * label,
        "amplitude": 1.0 + 0.3 * label,
        "period": timestamps / 4 + 5 * label,
    }


def pulse_train(label: int, timestamps: int, channels: int) -> np.ndarray:
    shape = class_morphology(label, timestamps)
    sigma = shape["width"] / 2.0
    t = np.arange(timestamps, dtype=np.float64)
    out = np.zeros((timestamps, channels), dtype=np.float64)
    for c in range(channels):
        offset = shape["period"] / 2.0 + CHANNEL_LAG * c
        centres = np.arange(offset - shape["period"], timestamps + shape["period"], shape["period"])
        out[:, c] = shape["amplitude"] * np.exp(-0.5 * ((t[:, None] - centres[None, :]) / sigma) ** 2).sum(axis=1)
    return out


def generate_synthetic(class_count: int, subjects: int, samples_per_subject: int, timestamps: int,
                       channels: int, seed: int, noise_std: float = 0.05,
                       subject_factor_range: Tuple[float, float] = (0.8, 1.2),
                       name: str = "synthetic", sampling_rate_hz: float = 250.0
                       ) -> Tuple[DatasetManifest, List[Sample]]:
    """
    Pulse-train dataset with one morphology per class.

    Labels cycle over the global sample index, so classes are balanced whenever
    the sample count is a multiple of K.
    """
    if class_count < 2:
        raise DatasetError(f"Synthetic data needs at least 2 classes, got {class_count}")
    if subjects < 3:
        raise DatasetError(f"Synthetic data needs at least 3 subjects, got {subjects}")
    if samples_per_subject < 1 or timestamps < 1 or channels < 1:
        raise DatasetError("samples_per_subject, timestamps and channels must be positive")

    rng = np.random.default_rng(seed)
    templates = [pulse_train(k, timestamps, channels) for k in range(class_count)]
    low, high = subject_factor_range
    factors = rng.uniform(low, high, size=subjects)

    samples = []
    index = 0
    for s in range(subjects):
        subject_id = f"S{s:03d}"
        for j in range(samples_per_subject):
            label = index % class_count
            window = templates[label] * factors[s]
            if noise_std > 0:
                window = window + rng.normal(0.0, noise_std, size=window.shape)
            samples.append(Sample(f"{subject_id}_{j:04d}", subject_id, label, window.astype(np.float32)))
            index += 1

    manifest = build_manifest(name, class_count, channels, timestamps, sampling_rate_hz, samples)
    manifest.label_names = [f"class_{k}" for k in range(class_count)]
    return manifest, samples
