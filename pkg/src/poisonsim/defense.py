"""Poisoning countermeasures: the angular-similarity detector, a
sanitization-hypersphere baseline, and synthetic legitimate-variation
sequences for calibrating both.

The detector's signal: legitimate template updates pull the centroid in
near-random directions, while poisoning injections march it consistently
toward the attacker, so consecutive update directions with high cosine
similarity betray an attack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import PopulationDataset, FeatureExtractor, _frozen_array
from .matchers import calibrate_threshold_at_eer

FACTORS = ("age", "pose", "facial_variation", "accessory")

# raw-space offset magnitudes mimicking each variation factor; accessories
# (glasses-like) produce the largest, most consistent shift
DEFAULT_FACTOR_SCALES = {
    "age": 0.02,
    "pose": 0.06,
    "facial_variation": 0.10,
    "accessory": 0.18,
}

LABEL_LEGITIMATE = "legitimate"
LABEL_POISONING = "poisoning"


class ZeroDirectionError(ValueError):
    """A zero-norm update direction has no angle to compare."""


def update_direction(centroid, sample) -> np.ndarray:
    """Direction x_c - x_i associated with absorbing `sample` into the template."""
    return np.asarray(centroid, dtype=float) - np.asarray(sample, dtype=float)


def cos_similarity(delta_a, delta_b) -> float:
    """Cosine of the angle between two update directions, clamped to [-1, 1]."""
    a = np.asarray(delta_a, dtype=float)
    b = np.asarray(delta_b, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroDirectionError("zero-norm update direction has no defined angle")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class UpdateSequence:
    """An ordered run of accepted update embeddings with its ground truth."""

    label: str
    embeddings: np.ndarray
    factor: str | None = None

    def __post_init__(self):
        if self.label not in (LABEL_LEGITIMATE, LABEL_POISONING):
            raise ValueError(f"unknown label {self.label!r}")
        if self.factor is not None and self.factor not in FACTORS:
            raise ValueError(f"unknown factor {self.factor!r}")
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if emb.shape[0] < 2:
            raise ValueError("update sequences need at least two entries")
        object.__setattr__(self, "embeddings", _frozen_array(emb))

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def poisoning_sequence(events) -> UpdateSequence:
    """Wrap the injected embeddings of an attack run for detector evaluation."""
    return UpdateSequence(LABEL_POISONING,
                          np.asarray([ev.embedding for ev in events], dtype=float))


@dataclass(frozen=True)
class DetectorConfig:
    cos_threshold: float = 0.0
    consecutive_flags_to_alarm: int = 1

    def __post_init__(self):
        if not -1.0 <= self.cos_threshold <= 1.0:
            raise ValueError("cos_threshold must lie in [-1, 1]")
        if self.consecutive_flags_to_alarm < 1:
            raise ValueError("consecutive_flags_to_alarm must be >= 1")


@dataclass(frozen=True)
class DetectionReport:
    """Per-pair cosines and the alarm decision for one update sequence.

    cosines[i] compares the directions of updates i and i+1; NaN marks a pair
    skipped because one direction had zero norm (never flagged, and it does
    not interrupt a flag run).
    """

    cosines: tuple[float, ...]
    flags: tuple[bool, ...]
    alarm: bool
    alarm_index: int | None
    threshold: float

    def __post_init__(self):
        if self.alarm != (self.alarm_index is not None):
            raise ValueError("alarm_index must be present exactly when alarmed")

    def to_dict(self) -> dict:
        return {
            "cosines": [None if math.isnan(c) else c for c in self.cosines],
            "flags": list(self.flags),
            "alarm": self.alarm,
            "alarm_index": self.alarm_index,
            "threshold": self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _absorb(centroid, count, x):
    """One flat running-mean step; an update equal to the centroid is a
    mathematical no-op and is kept exact against rounding."""
    x = np.asarray(x, dtype=float)
    if np.array_equal(x, centroid):
        return centroid.copy(), count + 1
    return (count * centroid + x) / (count + 1), count + 1


def _evolving_centroids(initial_centroid, initial_count, updates):
    """Centroid states c_0..c_L as each update is absorbed into a flat mean."""
    c = np.asarray(initial_centroid, dtype=float).copy()
    n = initial_count
    states = [c.copy()]
    for x in updates:
        c, n = _absorb(c, n, x)
        states.append(c.copy())
    return np.asarray(states)


def detect(seq: UpdateSequence, initial_centroid, cfg: DetectorConfig,
           initial_count: int = 1) -> DetectionReport:
    """Run the angular-similarity detector over one update sequence.

    Directions are taken against the live template centroid, which absorbs
    each update as a flat running mean weighted by `initial_count` existing
    entries. Pair (i, i+1) is flagged when its cosine reaches the threshold;
    the alarm fires after the configured number of consecutive flags.
    """
    if initial_count < 1:
        raise ValueError("initial_count must be >= 1")
    updates = seq.embeddings
    centroids = _evolving_centroids(initial_centroid, initial_count, updates)
    directions = [update_direction(centroids[i], updates[i])
                  for i in range(updates.shape[0])]
    cosines: list[float] = []
    flags: list[bool] = []
    alarm_index = None
    run = 0
    for i in range(len(directions) - 1):
        try:
            c = cos_similarity(directions[i], directions[i + 1])
        except ZeroDirectionError:
            cosines.append(float("nan"))
            flags.append(False)
            continue
        cosines.append(c)
        flagged = c >= cfg.cos_threshold
        flags.append(flagged)
        run = run + 1 if flagged else 0
        if alarm_index is None and run >= cfg.consecutive_flags_to_alarm:
            alarm_index = i
    return DetectionReport(
        cosines=tuple(cosines), flags=tuple(flags),
        alarm=alarm_index is not None, alarm_index=alarm_index,
        threshold=cfg.cos_threshold)


def calibrate_detector(legit_pairs, poison_pairs) -> tuple[float, float]:
    """Equal-error cosine threshold with poisoning as the positive class.

    Scores are raw pair cosines; non-finite entries (skipped pairs) are
    dropped. Returns (cos_threshold, eer) where at the threshold the fraction
    of legitimate pairs flagged equals the fraction of poisoning pairs missed.
    """
    legit = np.asarray(legit_pairs, dtype=float)
    poison = np.asarray(poison_pairs, dtype=float)
    legit = legit[np.isfinite(legit)]
    poison = poison[np.isfinite(poison)]
    return calibrate_threshold_at_eer(poison, legit)


# ---------------------------------------------------------------------------
# sanitization hypersphere


@dataclass(frozen=True)
class SanitizationReport:
    """Which updates a hypersphere sanitizer kept and which it rolled back."""

    kept: tuple[int, ...]
    reverted: tuple[int, ...]
    revert_windows: tuple[tuple[int, ...], ...]
    final_centroid: tuple[float, ...]

    @property
    def reverted_any(self) -> bool:
        return bool(self.reverted)

    def to_dict(self) -> dict:
        return {"kept": list(self.kept), "reverted": list(self.reverted),
                "revert_windows": [list(w) for w in self.revert_windows],
                "final_centroid": list(self.final_centroid)}


def sanitize_hypersphere(updates, initial_centroid, k: int, radius: float,
                         initial_count: int = 1) -> SanitizationReport:
    """Revert any k-window of accepted updates that drags the centroid out of
    the radius-`radius` sphere around the pre-window centroid.

    Updates stream in order; whenever the last k kept updates have moved the
    running centroid strictly beyond `radius` from where it stood before
    them, those k updates are dropped and the previous centroid restored.
    """
    if k < 1:
        raise ValueError("window size k must be >= 1")
    updates = np.atleast_2d(np.asarray(updates, dtype=float))
    snaps = [(np.asarray(initial_centroid, dtype=float).copy(), initial_count)]
    kept: list[int] = []
    reverted: list[int] = []
    windows: list[tuple[int, ...]] = []
    for idx in range(updates.shape[0]):
        c, n = snaps[-1]
        snaps.append(_absorb(c, n, updates[idx]))
        kept.append(idx)
        if len(kept) >= k:
            pre_centroid = snaps[-(k + 1)][0]
            if np.linalg.norm(snaps[-1][0] - pre_centroid) > radius:
                window = tuple(kept[-k:])
                windows.append(window)
                reverted.extend(window)
                del kept[-k:]
                del snaps[-k:]
    return SanitizationReport(
        kept=tuple(kept), reverted=tuple(sorted(reverted)),
        revert_windows=tuple(windows),
        final_centroid=tuple(float(v) for v in snaps[-1][0]))


def window_drifts(updates, initial_centroid, k: int,
                  initial_count: int = 1) -> np.ndarray:
    """Centroid displacement over every k-window of an update sequence
    (no reverting); the raw material for calibrating the hypersphere radius."""
    if k < 1:
        raise ValueError("window size k must be >= 1")
    updates = np.atleast_2d(np.asarray(updates, dtype=float))
    states = _evolving_centroids(initial_centroid, initial_count, updates)
    if states.shape[0] <= k:
        return np.empty(0)
    return np.linalg.norm(states[k:] - states[:-k], axis=1)


def calibrate_hypersphere_radius(drifts, percentile: float = 95.0) -> float:
    """Radius at the given percentile of legitimate window drifts."""
    drifts = np.asarray(drifts, dtype=float)
    if drifts.size == 0:
        raise ValueError("no drift observations to calibrate from")
    return float(np.percentile(drifts, percentile))


# ---------------------------------------------------------------------------
# legitimate-variation sequences


@dataclass(frozen=True)
class FactorConfig:
    """Synthetic structured-variation request for one factor.

    offset_scale of None uses the factor's default magnitude. Each sequence
    applies one fixed random raw-space direction, scaled per sample, to a
    user's resampled data, then shuffles the order.
    """

    factor: str
    n_sequences: int
    offset_scale: float | None = None
    sequence_length: int = 12

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ValueError(f"unknown factor {self.factor!r}; expected one of {FACTORS}")
        if self.n_sequences < 1 or self.sequence_length < 2:
            raise ValueError("need n_sequences >= 1 and sequence_length >= 2")

    @property
    def scale(self) -> float:
        return DEFAULT_FACTOR_SCALES[self.factor] \
            if self.offset_scale is None else self.offset_scale


def generate_variation_sequences(dataset: PopulationDataset,
                                 factor_config: FactorConfig,
                                 extractor: FeatureExtractor,
                                 seed: int) -> list[UpdateSequence]:
    """Legitimate update sequences with a consistent structured offset.

    Users are cycled in id order; per sequence, `sequence_length` raw test
    samples are drawn (distinct captures where the test split allows it),
    shifted along one fixed unit direction with per-sample magnitudes around
    the factor's scale, clipped to [0,1], shuffled, and embedded.
    """
    if dataset.mode != "raw":
        raise ValueError("variation sequences need a raw-mode dataset")
    rng = np.random.default_rng(seed)
    user_ids = sorted(dataset.users)
    sequences = []
    for s in range(factor_config.n_sequences):
        user = dataset.users[user_ids[s % len(user_ids)]]
        raw = user.test_raw
        # successive genuine captures are never the same bit-identical frame
        picks = rng.choice(raw.shape[0], size=factor_config.sequence_length,
                           replace=raw.shape[0] < factor_config.sequence_length)
        samples = raw[picks]
        direction = rng.standard_normal(samples.shape[1])
        direction /= np.linalg.norm(direction)
        magnitudes = factor_config.scale * rng.uniform(0.5, 1.5,
                                                       size=samples.shape[0])
        shifted = np.clip(samples + magnitudes[:, None] * direction, 0.0, 1.0)
        shifted = shifted[rng.permutation(shifted.shape[0])]
        sequences.append(UpdateSequence(
            LABEL_LEGITIMATE, extractor.extract_batch(shifted),
            factor=factor_config.factor))
    return sequences
