"""Deterministic synthetic sensor-data generation and CSV persistence.

RNG contract (the basis of the byte-identical determinism guarantee):

* The pseudo-random source is ``numpy.random.Generator(PCG64(seed))``.
* Each normal variate is produced by the inverse-CDF transform
  ``mu + sigma * NormalDist().inv_cdf(u)`` where ``u`` is one double from
  ``Generator.random()``; exactly one uniform is consumed per variate (the
  measure-zero draw u == 0.0 is rejected and redrawn).
* Stream order: rows are generated sequentially; within a row the fields are
  visited in the order temperature, humidity, moisture, mq3, mq4, and each
  field consumes its base draw N(mean_i, std_i) followed by its noise draw
  N(noise_mean, noise_sigma) -- ten variates per row.

Labels are computed from the noisy values (noise first, then classification).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .domain import (
    DataError,
    DatasetProvenance,
    LabeledDataset,
    NormalizationRanges,
    SensorReading,
    SpoilageLevel,
    SpoilageThresholds,
    validate_reading,
)
from .rules import BranchOrder, classify_spoilage

CSV_HEADER = "Temperature,Humidity,Moisture,MQ3,MQ4,Level"

_PHI_INV = NormalDist().inv_cdf


class MalformedHeaderError(DataError):
    """CSV header line does not match the dataset format."""


class MalformedRowError(DataError):
    def __init__(self, line_number: int, detail: str = ""):
        self.line_number = line_number
        msg = f"malformed dataset row on line {line_number}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class LevelOutOfRangeError(DataError):
    def __init__(self, line_number: int, value: int):
        self.line_number = line_number
        self.value = value
        super().__init__(f"level {value} out of range 0-3 on line {line_number}")


class EmptyRowsError(DataError):
    """CSV file with no data rows."""


@dataclass(frozen=True)
class GenConfig:
    """Synthetic-generation parameters: five (mean, std) pairs plus noise.

    Default means are Temperature 25, Humidity 60, Moisture 200, MQ3 150,
    MQ4 250; default dispersions are (2.5, 5, 25, 15, 15) with additive
    N(0, 2.5) noise on every field. With the default thresholds each field
    then exceeds its threshold with probability ~2-8%, so the label mix is
    dominated by the low level (roughly 82% of rows), with occasional
    exceedance events -- the skew the agents are benchmarked against. Wider
    profiles are plain config (e.g. stds=(5, 10, 50, 30, 30), noise_sigma=5
    doubles every dispersion and roughly triples the event rate).
    """

    means: tuple[float, float, float, float, float] = (25.0, 60.0, 200.0, 150.0, 250.0)
    stds: tuple[float, float, float, float, float] = (2.5, 5.0, 25.0, 15.0, 15.0)
    noise_mean: float = 0.0
    noise_sigma: float = 2.5
    thresholds: SpoilageThresholds = field(default_factory=SpoilageThresholds)
    branch_order: BranchOrder = BranchOrder.EMERGENCY_FIRST
    row_count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.means) != 5 or len(self.stds) != 5:
            raise DataError("means and stds must each have five entries")
        if any(s < 0 or not math.isfinite(s) for s in self.stds):
            raise DataError("per-field standard deviations must be finite and >= 0")
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise DataError("noise_sigma must be finite and >= 0")
        if self.row_count < 1:
            raise DataError(f"row_count must be >= 1, got {self.row_count}")
        if not (0 <= int(self.seed) < 2**64):
            raise DataError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")


class NormalSource:
    """Seeded source of normal variates via the inverse-CDF transform."""

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def normal(self, mu: float, sigma: float) -> float:
        u = self._rng.random()
        while u == 0.0:
            u = self._rng.random()
        return mu + sigma * _PHI_INV(u)


def sample_row(source: NormalSource, config: GenConfig) -> SensorReading:
    """Draw one reading; consumes exactly ten variates in the documented order."""
    values = []
    for mu, sigma in zip(config.means, config.stds):
        base = source.normal(mu, sigma)
        noise = source.normal(config.noise_mean, config.noise_sigma)
        values.append(base + noise)
    return SensorReading(*values)


def generate_dataset(config: GenConfig) -> LabeledDataset:
    """Generate `config.row_count` labeled rows; pure function of the config."""
    source = NormalSource(config.seed)
    rows = []
    for _ in range(config.row_count):
        reading = validate_reading(sample_row(source, config))
        label = classify_spoilage(reading, config.thresholds, config.branch_order)
        rows.append((reading, label))
    provenance = DatasetProvenance(seed=config.seed, source=None, config=config)
    return LabeledDataset(rows=tuple(rows), provenance=provenance)


def default_ranges(config: GenConfig) -> NormalizationRanges:
    """Normalization ranges mean_i +/- 4*sqrt(std_i^2 + noise_sigma^2).

    Widened to include the config's thresholds (so every threshold lies
    inside its range) and padded when a field has zero total variance.
    """
    pairs = []
    for mu, sigma, thr in zip(config.means, config.stds, config.thresholds.as_tuple()):
        half = 4.0 * math.sqrt(sigma * sigma + config.noise_sigma * config.noise_sigma)
        if half == 0.0:
            half = 0.5
        lo, hi = mu - half, mu + half
        pairs.append((min(lo, thr), max(hi, thr)))
    return NormalizationRanges(*pairs)


def _format_row(reading: SensorReading, label: SpoilageLevel) -> str:
    vals = ",".join(f"{v:.6f}" for v in reading.as_tuple())
    return f"{vals},{int(label)}"


def write_dataset_csv(dataset: LabeledDataset, destination) -> int:
    """Write the dataset as CSV (exact header, 6 fractional digits, LF).

    `destination` is a path or a text-file object. Returns the byte count
    written.
    """
    lines = [CSV_HEADER]
    lines.extend(_format_row(r, lvl) for r, lvl in dataset.rows)
    text = "\n".join(lines) + "\n"
    data = text.encode("ascii")
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            fh.write(data)
    elif isinstance(destination, io.TextIOBase):
        destination.write(text)
    else:
        destination.write(data)
    return len(data)


def read_dataset_csv(source) -> LabeledDataset:
    """Parse the CSV format written by write_dataset_csv.

    Line numbers in errors are physical (header is line 1). Labels are taken
    from the file as-is; provenance records the source identifier only.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise DataError(f"dataset file not found: {path}")
        text = path.read_text(encoding="ascii")
        name = str(path)
    else:
        text = source.read()
        name = getattr(source, "name", "<stream>")

    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        found = lines[0].strip() if lines else "<empty file>"
        raise MalformedHeaderError(f"expected header {CSV_HEADER!r}, found {found!r}")

    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if line.strip() == "":
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise MalformedRowError(i, f"expected 6 fields, found {len(parts)}")
        try:
            values = [float(p) for p in parts[:5]]
        except ValueError as exc:
            raise MalformedRowError(i, str(exc)) from None
        if any(not math.isfinite(v) for v in values):
            raise MalformedRowError(i, "non-finite value")
        try:
            level_code = int(parts[5])
        except ValueError:
            raise MalformedRowError(i, f"level {parts[5]!r} is not an integer") from None
        if level_code not in (0, 1, 2, 3):
            raise LevelOutOfRangeError(i, level_code)
        rows.append((SensorReading(*values), SpoilageLevel(level_code)))
    if not rows:
        raise EmptyRowsError("dataset file contains a header but no rows")
    return LabeledDataset(rows=tuple(rows), provenance=DatasetProvenance(source=name))
