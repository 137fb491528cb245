"""Rule-based spoilage classification, observation normalization, rewards.

The classifier is a fixed branch sequence over the five raw sensor values.
Two branch orders exist: the literal sequence (under which the emergency
level 3 is unreachable, because the any-threshold branch subsumes its
condition) and an emergency-first reordering that makes level 3 reachable.
EmergencyFirst is the default.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .domain import (
    DataError,
    NormalizationRanges,
    SensorReading,
    SpoilageLevel,
    SpoilageThresholds,
)


class BranchOrder(enum.Enum):
    PAPER_LITERAL = "paper"
    EMERGENCY_FIRST = "emergency-first"


class ShapingMode(enum.Enum):
    RAW = "raw"
    LOG_SHAPED = "log"


@dataclass(frozen=True)
class ShapingConfig:
    """Reward shaping parameters.

    LOG_SHAPED maps a raw reward r to ln(max(r + 1, floor_epsilon)) - 1; the
    floor keeps the logarithm finite at r = -1. RAW passes rewards through.
    """

    mode: ShapingMode = ShapingMode.RAW
    floor_epsilon: float = math.exp(-2.0)

    def __post_init__(self):
        if not (self.floor_epsilon > 0):
            raise DataError(f"floor_epsilon must be > 0, got {self.floor_epsilon!r}")


def classify_spoilage(
    reading: SensorReading,
    thresholds: SpoilageThresholds,
    order: BranchOrder = BranchOrder.EMERGENCY_FIRST,
) -> SpoilageLevel:
    """Classify one reading into a spoilage level 0-3.

    Branches, on raw (unnormalized) values:
      (a) temperature > T and humidity < H        -> 2 (moderate)
      (b) any of the five fields > its threshold  -> 0 (no-tracking)
      (c) temperature > T and humidity > H        -> 3 (emergency)
      (d) otherwise                               -> 1 (low)

    PAPER_LITERAL evaluates (a) (b) (c) (d): branch (b) fires on any
    temperature exceedance, so (c) never fires and 3 is never returned.
    EMERGENCY_FIRST evaluates (a) (c) (b) (d).
    """
    t, h, m, q3, q4 = reading.as_tuple()
    tt, ht, mt, q3t, q4t = thresholds.as_tuple()

    def branch_a() -> bool:
        return t > tt and h < ht

    def branch_b() -> bool:
        return t > tt or h > ht or m > mt or q3 > q3t or q4 > q4t

    def branch_c() -> bool:
        return t > tt and h > ht

    if order is BranchOrder.PAPER_LITERAL:
        if branch_a():
            return SpoilageLevel.MODERATE
        if branch_b():
            return SpoilageLevel.NO_TRACKING
        if branch_c():
            return SpoilageLevel.HIGH_EMERGENCY
        return SpoilageLevel.LOW
    if branch_a():
        return SpoilageLevel.MODERATE
    if branch_c():
        return SpoilageLevel.HIGH_EMERGENCY
    if branch_b():
        return SpoilageLevel.NO_TRACKING
    return SpoilageLevel.LOW


def normalize_observation(
    reading: SensorReading, ranges: NormalizationRanges
) -> np.ndarray:
    """Map a reading to a [0,1]^5 observation vector.

    component_i = clamp((value_i - min_i) / (max_i - min_i), 0, 1); values
    outside the range clamp rather than error (noise can exceed any fixed
    range).
    """
    values = np.asarray(reading.as_tuple(), dtype=np.float64)
    pairs = ranges.as_tuple()
    lo = np.asarray([p[0] for p in pairs], dtype=np.float64)
    hi = np.asarray([p[1] for p in pairs], dtype=np.float64)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def raw_reward(true_level: SpoilageLevel | int, action: SpoilageLevel | int) -> int:
    """+1 iff the action code equals the true level code, else -1."""
    return 1 if int(true_level) == int(action) else -1


def shape_reward(raw: float, config: ShapingConfig) -> float:
    """Apply the configured shaping to a raw reward."""
    if config.mode is ShapingMode.RAW:
        return raw
    return math.log(max(raw + 1.0, config.floor_epsilon)) - 1.0


def ranges_from_dataset(
    readings_matrix: np.ndarray, thresholds: SpoilageThresholds | None = None
) -> NormalizationRanges:
    """Build normalization ranges from observed per-field min/max.

    When thresholds are supplied the ranges are widened to include them, so
    that every threshold lies inside its variable's range; degenerate ranges
    (constant columns) are padded by 0.5 on each side.
    """
    data = np.asarray(readings_matrix, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 5:
        raise DataError(f"expected an (n, 5) readings matrix, got shape {data.shape}")
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    if thresholds is not None:
        thr = np.asarray(thresholds.as_tuple(), dtype=np.float64)
        lo = np.minimum(lo, thr)
        hi = np.maximum(hi, thr)
    degenerate = hi - lo <= 0
    lo = np.where(degenerate, lo - 0.5, lo)
    hi = np.where(degenerate, hi + 0.5, hi)
    pairs = tuple((float(a), float(b)) for a, b in zip(lo, hi))
    return NormalizationRanges(*pairs)
