"""Actuator emulation and serial-log ingestion.

The deployed monitor is a microcontroller that reads four sensors
(temperature, humidity, MQ3, MQ4), drives a vent servo plus three alert
LEDs, and prints one `T=..;H=..;MQ3=..;MQ4=..` line per sample over its
serial port.  This module emulates the actuation rules exactly as wired
on the device and turns captured serial logs into labeled datasets so the
same training and evaluation code runs on real captures.

The actuation thresholds are the firmware's trigger points and are not
the same numbers the classifier uses; humidity has no actuation branch
at all (no vent response is wired to it), which is why HardwareThresholds
carries only three fields.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass

import numpy as np

from .domain import (
    DataError,
    DatasetProvenance,
    EmptyDatasetError,
    LabeledDataset,
    NormalizationRanges,
    SensorReading,
    SpoilageThresholds,
)
from .rules import BranchOrder, classify_spoilage, ranges_from_dataset

LOG_FIELD_NAMES = ("temperature", "humidity", "mq3", "mq4")

# Default moisture substituted for logged rows: the capture rig has no
# moisture probe. 200 sits below every moisture threshold used here, so a
# substituted row can never fire the moisture branch of the classifier.
DEFAULT_MOISTURE = 200.0


class MalformedLineError(DataError):
    """A serial-log line that does not match the record grammar."""

    def __init__(self, line_number: int, line: str):
        self.line_number = line_number
        self.line = line
        super().__init__(f"malformed serial-log line {line_number}: {line!r}")


class TooFewRecordsError(DataError):
    """A log summary needs at least two records for a sample deviation."""

    def __init__(self, count: int):
        self.count = count
        super().__init__(f"need at least 2 records to summarize, got {count}")


@dataclass(frozen=True)
class HardwareThresholds:
    """Firmware trigger points for the servo and alert LEDs."""

    temperature: float = 28.5
    mq3: float = 270.0
    mq4: float = 340.0

    def __post_init__(self):
        for name in ("temperature", "mq3", "mq4"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"hardware threshold {name!r} must be finite")


@dataclass(frozen=True)
class ActuatorState:
    """Servo angle plus the three alert LEDs after one evaluation pass."""

    servo_angle: int = 0
    led1: bool = False
    led2: bool = False
    led3: bool = False

    def __post_init__(self):
        if self.servo_angle not in (0, 90, 180):
            raise DataError(
                f"servo angle must be 0, 90 or 180, got {self.servo_angle}"
            )


@dataclass(frozen=True)
class SensorLogRecord:
    """One parsed serial-log sample; sequence_number is its 1-based line."""

    sequence_number: int
    temperature: float
    humidity: float
    mq3: float
    mq4: float

    def __post_init__(self):
        if self.sequence_number < 1:
            raise DataError(
                f"sequence number must be >= 1, got {self.sequence_number}"
            )
        for name in LOG_FIELD_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"non-finite value in log field {name!r}")

    def values(self) -> tuple:
        return (self.temperature, self.humidity, self.mq3, self.mq4)


def actuate(
    record: SensorLogRecord, thresholds: HardwareThresholds = HardwareThresholds()
) -> ActuatorState:
    """Replay the firmware's actuation pass for one sample.

    The device evaluates three independent ifs in a fixed order, each
    overwriting the servo angle, so a later trigger wins the servo while
    the LEDs accumulate: temperature opens the vent fully (180, LED1),
    either gas exceedance half-opens it (90, LED2 for MQ3, LED3 for MQ4).
    No trigger leaves the servo closed with all LEDs off.
    """
    servo = 0
    led1 = led2 = led3 = False
    if record.temperature > thresholds.temperature:
        servo = 180
        led1 = True
    if record.mq3 > thresholds.mq3:
        servo = 90
        led2 = True
    if record.mq4 > thresholds.mq4:
        servo = 90
        led3 = True
    return ActuatorState(servo_angle=servo, led1=led1, led2=led2, led3=led3)


# One sample per line, no inner whitespace; real numbers in any float
# notation the firmware's printf can emit (fixed or exponent form).
_REAL = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_LINE_RE = re.compile(rf"^T=({_REAL});H=({_REAL});MQ3=({_REAL});MQ4=({_REAL})$")


@dataclass(frozen=True)
class ParsedLog:
    """Accepted records plus the count of lines skipped in lenient mode."""

    records: tuple
    skipped: int


def parse_serial_log(source, strict: bool = True) -> ParsedLog:
    """Parse a serial capture into SensorLogRecord entries.

    `source` is a string of log text, an open text stream, or any iterable
    of lines.  Blank (whitespace-only) lines are ignored in both modes.
    A line that does not match the grammar raises MalformedLineError with
    its 1-based line number in strict mode; in lenient mode it is skipped
    and counted in the result's `skipped` field.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    elif isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = [str(line) for line in source]

    records = []
    skipped = 0
    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        match = _LINE_RE.match(line)
        if match is None:
            if strict:
                raise MalformedLineError(line_number, raw)
            skipped += 1
            continue
        t, h, q3, q4 = (float(g) for g in match.groups())
        records.append(
            SensorLogRecord(
                sequence_number=line_number,
                temperature=t,
                humidity=h,
                mq3=q3,
                mq4=q4,
            )
        )
    return ParsedLog(records=tuple(records), skipped=skipped)


def format_serial_record(record: SensorLogRecord) -> str:
    """Render a record back to the serial line grammar.

    Values use repr's shortest round-trip form, so parsing the result
    reproduces the original values exactly, not just within tolerance.
    """
    t, h, q3, q4 = (repr(float(v)) for v in record.values())
    return f"T={t};H={h};MQ3={q3};MQ4={q4}"


@dataclass(frozen=True)
class LogSummary:
    """Per-field (mean, sample standard deviation) over a capture."""

    count: int
    temperature: tuple
    humidity: tuple
    mq3: tuple
    mq4: tuple

    def as_dict(self) -> dict:
        out = {"count": self.count}
        for name in LOG_FIELD_NAMES:
            mean, std = getattr(self, name)
            out[name] = {"mean": mean, "std": std}
        return out


def summarize_log(records) -> LogSummary:
    """Mean and n-1 standard deviation of each logged field."""
    records = tuple(records)
    if len(records) < 2:
        raise TooFewRecordsError(len(records))
    data = np.array([r.values() for r in records], dtype=np.float64)
    means = data.mean(axis=0)
    stds = data.std(axis=0, ddof=1)
    stats = {
        name: (float(means[i]), float(stds[i]))
        for i, name in enumerate(LOG_FIELD_NAMES)
    }
    return LogSummary(count=len(records), **stats)


# Classification thresholds for captured data. Temperature/humidity/gas
# points match the deployed sensors' calibration; moisture keeps the
# synthetic default, which DEFAULT_MOISTURE deliberately stays below.
REALTIME_THRESHOLDS = SpoilageThresholds(
    temperature=28.5, humidity=92.0, moisture=250.0, mq3=270.0, mq4=340.0
)


@dataclass(frozen=True)
class IngestConfig:
    """Snapshot of how a log became a dataset, kept in its provenance."""

    thresholds: SpoilageThresholds
    ranges: NormalizationRanges
    order: BranchOrder
    default_moisture: float


def log_to_dataset(
    records,
    thresholds: SpoilageThresholds = REALTIME_THRESHOLDS,
    ranges: NormalizationRanges | None = None,
    order: BranchOrder = BranchOrder.EMERGENCY_FIRST,
    default_moisture: float = DEFAULT_MOISTURE,
    source: str | None = "serial-log",
) -> LabeledDataset:
    """Label a parsed capture so it trains and evaluates like generated data.

    Each record becomes a five-field reading with `default_moisture`
    standing in for the missing probe, labeled by the rule classifier
    under `thresholds` and `order`.  Row order and count are preserved.
    When `ranges` is None, normalization ranges are fit to the observed
    min/max and widened to cover the thresholds; either way the ranges
    land in the dataset's provenance config for downstream training.
    """
    records = tuple(records)
    if not records:
        raise EmptyDatasetError("cannot build a dataset from an empty log")
    if not math.isfinite(default_moisture):
        raise DataError("default moisture must be finite")
    rows = []
    for record in records:
        reading = SensorReading(
            temperature=record.temperature,
            humidity=record.humidity,
            moisture=default_moisture,
            mq3=record.mq3,
            mq4=record.mq4,
        )
        rows.append((reading, classify_spoilage(reading, thresholds, order)))
    if ranges is None:
        matrix = np.array([reading.as_tuple() for reading, _ in rows])
        ranges = ranges_from_dataset(matrix, thresholds)
    config = IngestConfig(
        thresholds=thresholds,
        ranges=ranges,
        order=order,
        default_moisture=default_moisture,
    )
    provenance = DatasetProvenance(seed=None, source=source, config=config)
    return LabeledDataset(rows=tuple(rows), provenance=provenance)
