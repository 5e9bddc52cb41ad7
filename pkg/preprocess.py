"""
ECG signal preprocessing: resampling, standardization, R-peak heartbeat
segmentation and fixed-window segmentation.

Typical use:
    recordings = read_recordings("data/raw")
    samples, stats = preprocess_recordings(recordings, target_rate=250, mode="window", window_len=250)
"""

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dataio import (
    DatasetError,
    DatasetManifest,
    ManifestEntry,
    Sample,
    read_array,
    read_manifest,
    write_array,
    _write_json_atomic,
    MANIFEST_NAME,
)


INTEGRATION_WINDOW = 30
THRESHOLD_WINDOW = 500
THRESHOLD_RATIO = 0.5
REFRACTORY_SAMPLES = 50


class PreprocessError(ValueError):
    """Signal cannot be processed (bad rate, no heartbeats, ...)."""


@dataclass
class RawRecording:
    """Variable-length multichannel recording before segmentation"""
    signal: np.ndarray  # (T_raw, C)
    sampling_rate_hz: float
    subject_id: str
    label: int
    recording_id: str = ""

    def __post_init__(self):
        if self.sampling_rate_hz <= 0:
            raise PreprocessError(f"Recording '{self.recording_id}': sampling rate must be positive")
        if self.signal.ndim != 2 or self.signal.shape[0] < 2:
            raise PreprocessError(
                f"Recording '{self.recording_id}': expected (T>=2, C) signal, got {self.signal.shape}"
            )

    @property
    def length(self) -> int:
        return self.signal.shape[0]

    @property
    def channels(self) -> int:
        return self.signal.shape[1]


@dataclass
class HeartbeatSegments:
    windows: np.ndarray  # (n_beats, pad_to, C)
    peaks: List[int]     # R-peak of each kept beat
    discarded: int
    pad_to: int
    clipped: int = 0     # kept beats that lost samples at a window edge


def resample(recording: RawRecording, target_rate: float) -> RawRecording:
    """Moving-average anti-aliasing followed by integer decimation."""
    ratio = recording.sampling_rate_hz / target_rate
    factor = int(round(ratio))
    if factor < 1 or not np.isclose(ratio, factor):
        raise PreprocessError(
            f"Cannot resample {recording.sampling_rate_hz} Hz to {target_rate} Hz: "
            f"factor {ratio:g} is not an integer"
        )
    if factor == 1:
        return replace(recording, signal=recording.signal.copy())
    kept = (recording.length // factor) * factor
    if kept < 2 * factor:
        raise PreprocessError(f"Recording '{recording.recording_id}' too short to decimate by {factor}")
    blocks = recording.signal[:kept].reshape(-1, factor, recording.channels)
    return replace(recording, signal=blocks.mean(axis=1), sampling_rate_hz=float(target_rate))


def standardize(recording: RawRecording) -> RawRecording:
    """Per-channel zero mean, unit population std; constant channels become zeros."""
    signal = recording.signal.astype(np.float64)
    mean = signal.mean(axis=0)
    std = signal.std(axis=0)
    flat = std == 0
    if flat.any():
        warnings.warn(
            f"Recording '{recording.recording_id}': zero-variance channel(s) "
            f"{np.flatnonzero(flat).tolist()} set to zeros"
        )
    out = np.zeros_like(signal)
    live = ~flat
    out[:, live] = (signal[:, live] - mean[live]) / std[live]
    return replace(recording, signal=out)


def detect_r_peaks(recording: RawRecording) -> List[int]:
    """
    Energy-based R-peak detector.

    The channel-averaged signal is differentiated, squared and integrated over
    a 30-sample moving window. Regions above half the local (500-sample) maximum
    of that envelope each contribute the position of the largest averaged-signal
    value. Peaks closer than 50 samples keep only the taller one.
    """
    averaged = recording.signal.mean(axis=1)
    slope = np.diff(averaged, prepend=averaged[0])
    energy = pd.Series(slope ** 2)
    envelope = energy.rolling(INTEGRATION_WINDOW, center=True, min_periods=1).mean()
    local_max = envelope.rolling(THRESHOLD_WINDOW, center=True, min_periods=1).max()
    above = (envelope > THRESHOLD_RATIO * local_max).to_numpy() & (envelope.to_numpy() > 0)

    candidates: List[int] = []
    edges = np.diff(above.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    for start, end in zip(starts, ends):
        candidates.append(int(start + np.argmax(averaged[start:end])))

    peaks: List[int] = []
    for idx in candidates:
        if peaks and idx - peaks[-1] < REFRACTORY_SAMPLES:
            if averaged[idx] > averaged[peaks[-1]]:
                peaks[-1] = idx
            continue
        peaks.append(idx)
    if not peaks:
        raise PreprocessError(f"Recording '{recording.recording_id}': no heartbeats detected")
    return peaks


def _beat_bounds(peaks: Sequence[int], length: int) -> List[Tuple[int, int, int]]:
    bounds = []
    for k, peak in enumerate(peaks):
        start = 0 if k == 0 else (peaks[k - 1] + peak) // 2
        end = length if k == len(peaks) - 1 else (peak + peaks[k + 1]) // 2
        bounds.append((start, peak, end))
    return bounds


def fitting_length(peaks: Sequence[int], length: int) -> int:
    """Smallest window that holds every beat centred on its R-peak."""
    bounds = _beat_bounds(peaks, length)
    left = max(peak - start for start, peak, _ in bounds)
    right = max(end - peak for _, peak, end in bounds)
    size = max(left + right, 1)
    while size // 2 < left or size - size // 2 < right:
        size += 1
    return size


def segment_heartbeats(recording: RawRecording, peaks: Sequence[int],
                       pad_to: Optional[int] = None) -> HeartbeatSegments:
    """
    Cut midpoint-to-midpoint beats and centre each R-peak in a zero window.

    Beats longer than `pad_to` are dropped and counted. A beat that fits but
    reaches further than pad_to // 2 on one side of its peak loses those samples;
    it is kept, counted as clipped and reported with a warning. With
    pad_to=None the window is the smallest one that fits every beat.
    """
    if not peaks:
        raise PreprocessError(f"Recording '{recording.recording_id}': no heartbeats to segment")
    if pad_to is None:
        pad_to = fitting_length(peaks, recording.length)
    if pad_to < 1:
        raise PreprocessError(f"pad_to must be positive, got {pad_to}")

    centre = pad_to // 2
    windows, kept_peaks, discarded, clipped = [], [], 0, 0
    for start, peak, end in _beat_bounds(peaks, recording.length):
        if end - start > pad_to:
            discarded += 1
            continue
        window = np.zeros((pad_to, recording.channels), dtype=np.float64)
        offset = centre - (peak - start)
        lo = max(0, offset)
        hi = min(pad_to, offset + (end - start))
        if lo > offset or hi < offset + (end - start):
            clipped += 1
        window[lo:hi] = recording.signal[start + (lo - offset):start + (hi - offset)]
        windows.append(window)
        kept_peaks.append(int(peak))
    stacked = np.stack(windows) if windows else np.zeros((0, pad_to, recording.channels))
    if clipped:
        warnings.warn(
            f"Recording '{recording.recording_id}': {clipped} beat(s) clipped to fit "
            f"{pad_to} samples centred on the R-peak"
        )
    return HeartbeatSegments(stacked, kept_peaks, discarded, pad_to, clipped)


def segment_fixed_windows(recording: RawRecording, window_len: int) -> np.ndarray:
    """Non-overlapping windows of exactly window_len; the tail is dropped."""
    if window_len < 1:
        raise PreprocessError(f"window_len must be >= 1, got {window_len}")
    count = recording.length // window_len
    return recording.signal[:count * window_len].reshape(count, window_len, recording.channels).copy()


def filter_consistent_subjects(recordings: Sequence[RawRecording],
                               verbose: bool = False) -> List[RawRecording]:
    """Drop subjects whose recordings disagree on the label."""
    labels: Dict[str, set] = {}
    for rec in recordings:
        labels.setdefault(rec.subject_id, set()).add(rec.label)
    mixed = {s for s, found in labels.items() if len(found) > 1}
    if verbose and mixed:
        print(f"[FILTER] Dropped {len(mixed)} subject(s) with conflicting labels")
    return [r for r in recordings if r.subject_id not in mixed]


def preprocess_recordings(recordings: Sequence[RawRecording], target_rate: float, mode: str,
                          window_len: Optional[int] = None, pad_to: Optional[int] = None,
                          verbose: bool = False) -> Tuple[List[Sample], Dict[str, int]]:
    """
    resample -> standardize -> segment for every recording.

    Returns the samples and counters: recordings, skipped (no heartbeats),
    discarded (overlong beats), clipped (kept beats cut at a window edge) and
    the emitted window length.
    """
    if mode not in ("heartbeat", "window"):
        raise PreprocessError(f"Unknown segmentation mode '{mode}' (expected heartbeat or window)")
    if mode == "window" and window_len is None:
        raise PreprocessError("Window mode needs window_len")

    prepared = [standardize(resample(rec, target_rate)) for rec in recordings]
    stats = {"recordings": len(prepared), "skipped": 0, "discarded": 0, "clipped": 0, "timestamps": 0}
    samples: List[Sample] = []

    if mode == "window":
        stats["timestamps"] = int(window_len)
        for rec in prepared:
            for j, window in enumerate(segment_fixed_windows(rec, window_len)):
                samples.append(Sample(f"{rec.recording_id}_w{j:04d}", rec.subject_id, rec.label,
                                      window.astype(np.float32)))
        return samples, stats

    detected = []
    for rec in prepared:
        try:
            detected.append((rec, detect_r_peaks(rec)))
        except PreprocessError as e:
            stats["skipped"] += 1
            if verbose:
                print(f"[WARN] {e}")
    if not detected:
        raise PreprocessError("No heartbeats detected in any recording")
    if pad_to is None:
        pad_to = max(fitting_length(peaks, rec.length) for rec, peaks in detected)
    stats["timestamps"] = int(pad_to)

    for rec, peaks in detected:
        segments = segment_heartbeats(rec, peaks, pad_to)
        stats["discarded"] += segments.discarded
        stats["clipped"] += segments.clipped
        for j, window in enumerate(segments.windows):
            samples.append(Sample(f"{rec.recording_id}_b{j:04d}", rec.subject_id, rec.label,
                                  window.astype(np.float32)))
    if verbose:
        print(f"[SEGMENT] {len(samples):,} beats from {len(detected)} recordings "
              f"({stats['discarded']} overlong discarded, {stats['clipped']} clipped, "
              f"{stats['skipped']} recordings without beats)")
    return samples, stats


# ---------------------------------------------------------------------------
# Raw recording directories
# ---------------------------------------------------------------------------

def read_recordings(root) -> Tuple[DatasetManifest, List[RawRecording]]:
    """Raw recordings use the dataset layout with a per-entry `timestamps`."""
    manifest = read_manifest(root)
    recordings = []
    for entry in manifest.entries:
        if entry.timestamps is None:
            raise DatasetError(f"Recording '{entry.sample_id}': manifest entry needs 'timestamps'")
        signal = read_array(root, entry, entry.timestamps, manifest.channels)
        recordings.append(RawRecording(signal.astype(np.float64), manifest.sampling_rate_hz,
                                       entry.subject_id, entry.label, entry.sample_id))
    return manifest, recordings


def write_recordings(root, name: str, classes: int, recordings: Sequence[RawRecording]) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not recordings:
        raise DatasetError("No recordings to write")
    rates = {r.sampling_rate_hz for r in recordings}
    channels = {r.channels for r in recordings}
    if len(rates) != 1 or len(channels) != 1:
        raise DatasetError("Recordings must share one sampling rate and channel count")
    entries = []
    for rec in recordings:
        relative = f"recordings/{rec.recording_id}.f32"
        write_array(root, relative, rec.signal)
        entries.append(ManifestEntry(rec.recording_id, rec.subject_id, rec.label, relative,
                                     timestamps=rec.length))
    manifest = DatasetManifest(name, classes, channels.pop(),
                               max(r.length for r in recordings), rates.pop(), entries)
    manifest.validate()
    _write_json_atomic(root / MANIFEST_NAME, manifest.to_dict())
    return manifest
