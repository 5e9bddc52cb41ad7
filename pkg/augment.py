"""
Training-time augmentation pool for raw ECG windows.

Each spec is written as <name><degree>, e.g. "jitter0.2", "drop0.5", "mask0.1",
or a bare name for the default degree. During training exactly one spec from
the pool is picked uniformly per window; evaluation never augments.
"""

import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np


KINDS = ("none", "shuffle", "temporal_mask", "freq_mask", "jitter", "scale", "drop")
UNIT_INTERVAL_KINDS = {"shuffle", "temporal_mask", "freq_mask", "drop"}

DEFAULT_DEGREES = {
    "none": 0.0,
    "shuffle": 0.5,
    "temporal_mask": 0.1,
    "freq_mask": 0.1,
    "jitter": 0.1,
    "scale": 0.2,
    "drop": 0.1,
}

ALIASES = {
    "mask": "temporal_mask",
    "tmask": "temporal_mask",
    "freqmask": "freq_mask",
    "dropout": "drop",
}

_SPEC_RE = re.compile(r"^(?P<name>[a-z_]+?)(?P<degree>\d+(?:\.\d*)?|\.\d+)?$")


class AugmentationError(ValueError):
    """Unknown or malformed augmentation spec."""


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    parameter: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentationError(f"Unknown augmentation '{self.kind}' (known: {', '.join(KINDS)})")
        if self.parameter < 0:
            raise AugmentationError(f"{self.kind}: degree must be >= 0, got {self.parameter}")
        if self.kind in UNIT_INTERVAL_KINDS and self.parameter > 1:
            raise AugmentationError(f"{self.kind}: degree must lie in [0, 1], got {self.parameter}")

    def __str__(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}{self.parameter:g}"


def parse_spec(text: str) -> AugmentationSpec:
    """'jitter0.2' -> AugmentationSpec('jitter', 0.2)."""
    cleaned = text.strip().lower()
    match = _SPEC_RE.match(cleaned)
    if not match:
        raise AugmentationError(f"Cannot parse augmentation spec '{text}'")
    name = ALIASES.get(match.group("name"), match.group("name"))
    if name not in KINDS:
        raise AugmentationError(f"Unknown augmentation '{match.group('name')}' in '{text}'")
    degree = match.group("degree")
    if name == "none":
        if degree is not None:
            raise AugmentationError(f"'none' takes no degree, got '{text}'")
        return AugmentationSpec("none", 0.0)
    return AugmentationSpec(name, float(degree) if degree is not None else DEFAULT_DEGREES[name])


def parse_pool(texts: Sequence[str]) -> List[AugmentationSpec]:
    pool = [parse_spec(t) for t in texts]
    if not pool:
        raise AugmentationError("Augmentation pool must not be empty")
    return pool


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def _shuffle(window, p, rng):
    if rng.random() < p:
        return window[:, rng.permutation(window.shape[1])]
    return window.copy()


def _temporal_mask(window, ratio, rng):
    out = window.copy()
    count = round_half_away(ratio * window.shape[0])
    if count:
        out[rng.choice(window.shape[0], size=count, replace=False)] = 0.0
    return out


def _freq_mask(window, ratio, rng):
    spectrum = np.fft.rfft(window, axis=0)
    bins = spectrum.shape[0]
    count = round_half_away(ratio * bins)
    if count == 0:
        return np.fft.irfft(spectrum, n=window.shape[0], axis=0).astype(window.dtype)
    for c in range(window.shape[1]):
        spectrum[rng.choice(bins, size=count, replace=False), c] = 0.0
    # irfft mirrors each bin onto its conjugate, keeping the result real
    return np.fft.irfft(spectrum, n=window.shape[0], axis=0).astype(window.dtype)


def _jitter(window, sigma, rng):
    if sigma == 0:
        return window.copy()
    return (window + rng.normal(0.0, sigma, size=window.shape)).astype(window.dtype)


def _scale(window, spread, rng):
    factors = rng.uniform(1.0 - spread, 1.0 + spread, size=window.shape[1])
    return (window * factors[None, :]).astype(window.dtype)


def _drop(window, p, rng):
    keep = rng.random(window.shape) >= p
    return np.where(keep, window, 0.0).astype(window.dtype)


_APPLY: Dict[str, Callable] = {
    "none": lambda window, _, __: window.copy(),
    "shuffle": _shuffle,
    "temporal_mask": _temporal_mask,
    "freq_mask": _freq_mask,
    "jitter": _jitter,
    "scale": _scale,
    "drop": _drop,
}


def apply(window: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one augmentation to a (T, C) window; shape is preserved."""
    if window.ndim != 2:
        raise AugmentationError(f"Expected a (T, C) window, got shape {window.shape}")
    return _APPLY[spec.kind](window, spec.parameter, rng)


def choose_spec(pool: Sequence[AugmentationSpec], rng: np.random.Generator) -> AugmentationSpec:
    """Uniform pick from the pool."""
    if not pool:
        raise AugmentationError("Augmentation pool must not be empty")
    return pool[int(rng.integers(len(pool)))]


def select_and_apply(window: np.ndarray, pool: Sequence[AugmentationSpec],
                     rng: np.random.Generator, training: bool) -> np.ndarray:
    if not pool:
        raise AugmentationError("Augmentation pool must not be empty")
    if not training:
        return window
    return apply(window, choose_spec(pool, rng), rng)
