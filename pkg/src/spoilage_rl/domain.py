"""Shared vocabulary types for the spoilage workbench.

Five-variable sensor readings, the four-code spoilage level (which doubles as
the action space), per-variable thresholds, normalization ranges, and the
labeled dataset container used by every other module.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

FIELD_NAMES = ("temperature", "humidity", "moisture", "mq3", "mq4")


class SpoilageError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SpoilageError):
    """Invalid input data or configuration (maps to CLI exit code 2)."""


class NonFiniteFieldError(DataError):
    """A reading field is NaN or infinite."""

    def __init__(self, field_name: str):
        self.field_name = field_name
        super().__init__(f"non-finite value in field {field_name!r}")


class EmptyDatasetError(DataError):
    """A dataset with zero rows where at least one is required."""


class SpoilageLevel(enum.IntEnum):
    """Four-code spoilage label; the same codes name the agent's actions."""

    NO_TRACKING = 0
    LOW = 1
    MODERATE = 2
    HIGH_EMERGENCY = 3

    @property
    def level_name(self) -> str:
        return _LEVEL_NAMES[self]

    @property
    def action_name(self) -> str:
        return _ACTION_NAMES[self]


_LEVEL_NAMES = {
    SpoilageLevel.NO_TRACKING: "NoTracking",
    SpoilageLevel.LOW: "Low",
    SpoilageLevel.MODERATE: "Moderate",
    SpoilageLevel.HIGH_EMERGENCY: "HighEmergency",
}

_ACTION_NAMES = {
    SpoilageLevel.NO_TRACKING: "ContinueRoutine",
    SpoilageLevel.LOW: "MildAlert",
    SpoilageLevel.MODERATE: "AdjustStorage",
    SpoilageLevel.HIGH_EMERGENCY: "EmergencyIntervention",
}

N_ACTIONS = len(SpoilageLevel)


@dataclass(frozen=True)
class SensorReading:
    """One environmental sample.

    Values are real-valued doubles even for ADC-style counts; no rounding or
    range clamping is applied anywhere (noise may push values outside nominal
    physical ranges, e.g. humidity above 100).
    """

    temperature: float
    humidity: float
    moisture: float
    mq3: float
    mq4: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.temperature, self.humidity, self.moisture, self.mq3, self.mq4)


def validate_reading(reading: SensorReading) -> SensorReading:
    """Return `reading` unchanged if every field is finite.

    Raises NonFiniteFieldError naming the first offending field otherwise.
    """
    for name, value in zip(FIELD_NAMES, reading.as_tuple()):
        if not math.isfinite(value):
            raise NonFiniteFieldError(name)
    return reading


@dataclass(frozen=True)
class SpoilageThresholds:
    """Per-variable spoilage thresholds, in the units of each field."""

    temperature: float = 30.0
    humidity: float = 70.0
    moisture: float = 250.0
    mq3: float = 180.0
    mq4: float = 280.0

    def __post_init__(self):
        for name, value in zip(FIELD_NAMES, self.as_tuple()):
            if not math.isfinite(value) or value <= 0:
                raise DataError(f"threshold {name!r} must be finite and positive, got {value!r}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.temperature, self.humidity, self.moisture, self.mq3, self.mq4)


@dataclass(frozen=True)
class NormalizationRanges:
    """Per-variable (min, max) pairs mapping raw readings into [0, 1]."""

    temperature: tuple[float, float]
    humidity: tuple[float, float]
    moisture: tuple[float, float]
    mq3: tuple[float, float]
    mq4: tuple[float, float]

    def __post_init__(self):
        for name, (lo, hi) in zip(FIELD_NAMES, self.as_tuple()):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise DataError(f"range for {name!r} must be finite, got ({lo!r}, {hi!r})")
            if not lo < hi:
                raise DataError(f"range for {name!r} must satisfy min < max, got ({lo!r}, {hi!r})")

    def as_tuple(self) -> tuple[tuple[float, float], ...]:
        return (self.temperature, self.humidity, self.moisture, self.mq3, self.mq4)

    def covers(self, thresholds: SpoilageThresholds) -> bool:
        """True when every threshold lies within its variable's [min, max]."""
        return all(
            lo <= thr <= hi
            for (lo, hi), thr in zip(self.as_tuple(), thresholds.as_tuple())
        )


@dataclass(frozen=True)
class DatasetProvenance:
    """Where a dataset came from: a generation seed or a source file.

    `config` is the generation-config snapshot when the dataset was produced
    by the synthetic generator or the log-ingestion path; it is None for
    datasets read from bare CSV files (the CSV format carries no provenance).
    """

    seed: int | None = None
    source: str | None = None
    config: object | None = None


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered rows of (reading, label) plus provenance.

    When provenance carries a config snapshot, every label equals the rule
    classifier applied to its reading under that snapshot's thresholds and
    branch order; the generator and the ingestion path guarantee this by
    construction (and it is property-tested).
    """

    rows: tuple[tuple[SensorReading, SpoilageLevel], ...]
    provenance: DatasetProvenance = field(default_factory=DatasetProvenance)

    def __post_init__(self):
        if len(self.rows) < 1:
            raise EmptyDatasetError("a dataset must contain at least one row")

    def __len__(self) -> int:
        return len(self.rows)

    def readings(self):
        return [r for r, _ in self.rows]

    def labels(self):
        return [lvl for _, lvl in self.rows]
