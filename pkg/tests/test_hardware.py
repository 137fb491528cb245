"""Actuator replay, serial-log parsing, summaries, and log ingestion."""

import io
import math

import numpy as np
import pytest

from spoilage_rl.domain import (
    DataError,
    EmptyDatasetError,
    SpoilageLevel,
    SpoilageThresholds,
)
from spoilage_rl.hardware import (
    DEFAULT_MOISTURE,
    REALTIME_THRESHOLDS,
    ActuatorState,
    HardwareThresholds,
    MalformedLineError,
    SensorLogRecord,
    TooFewRecordsError,
    actuate,
    format_serial_record,
    log_to_dataset,
    parse_serial_log,
    summarize_log,
)
from spoilage_rl.rules import BranchOrder, classify_spoilage


def record(t, h, q3, q4, seq=1):
    return SensorLogRecord(
        sequence_number=seq, temperature=t, humidity=h, mq3=q3, mq4=q4
    )


# ---------------------------------------------------------------- actuation


def test_hardware_threshold_defaults():
    thr = HardwareThresholds()
    assert (thr.temperature, thr.mq3, thr.mq4) == (28.5, 270.0, 340.0)


def test_hardware_threshold_rejects_non_finite():
    with pytest.raises(DataError):
        HardwareThresholds(temperature=float("nan"))


def test_actuator_state_rejects_bad_angle():
    with pytest.raises(DataError):
        ActuatorState(servo_angle=45)


def test_actuate_temperature_only():
    state = actuate(record(29.0, 90.0, 200.0, 300.0))
    assert state == ActuatorState(servo_angle=180, led1=True)


def test_actuate_gas_overrides_servo_but_leds_accumulate():
    # mq3 fires after temperature, so the vent drops to half open while
    # both alert LEDs stay lit.
    state = actuate(record(29.0, 90.0, 280.0, 300.0))
    assert state == ActuatorState(servo_angle=90, led1=True, led2=True)


def test_actuate_mq4_only():
    state = actuate(record(25.0, 90.0, 200.0, 345.0))
    assert state == ActuatorState(servo_angle=90, led3=True)


def test_actuate_all_triggers():
    state = actuate(record(29.0, 90.0, 280.0, 345.0))
    assert state == ActuatorState(servo_angle=90, led1=True, led2=True, led3=True)


def test_actuate_temperature_and_mq4_skips_led2():
    state = actuate(record(29.0, 90.0, 200.0, 345.0))
    assert state == ActuatorState(servo_angle=90, led1=True, led3=True)


def test_actuate_nothing_fires():
    state = actuate(record(25.0, 99.0, 200.0, 300.0))
    assert state == ActuatorState(servo_angle=0)
    assert not (state.led1 or state.led2 or state.led3)


def test_actuate_thresholds_are_strict_inequalities():
    at_limits = record(28.5, 90.0, 270.0, 340.0)
    assert actuate(at_limits) == ActuatorState(servo_angle=0)


def test_actuate_humidity_never_matters():
    for h in (0.0, 50.0, 92.0, 100.0):
        assert actuate(record(25.0, h, 200.0, 300.0)) == ActuatorState()


# ------------------------------------------------------------------ parsing


GOOD_LINE = "T=28.5;H=90.0;MQ3=200.0;MQ4=300.0"


def test_parse_single_line():
    parsed = parse_serial_log(GOOD_LINE)
    assert parsed.skipped == 0
    (rec,) = parsed.records
    assert rec.sequence_number == 1
    assert rec.values() == (28.5, 90.0, 200.0, 300.0)


def test_parse_strict_raises_with_line_number():
    with pytest.raises(MalformedLineError) as info:
        parse_serial_log("T=28.5;H=;MQ3=1;MQ4=2")
    assert info.value.line_number == 1


def test_parse_strict_reports_first_bad_line():
    text = GOOD_LINE + "\n" + GOOD_LINE + "\nnot a record\n"
    with pytest.raises(MalformedLineError) as info:
        parse_serial_log(text, strict=True)
    assert info.value.line_number == 3


def test_parse_lenient_skips_and_counts():
    text = "\n".join([GOOD_LINE, "garbage", GOOD_LINE, GOOD_LINE])
    parsed = parse_serial_log(text, strict=False)
    assert len(parsed.records) == 3
    assert parsed.skipped == 1


def test_parse_blank_lines_ignored_in_both_modes():
    text = "\n\n" + GOOD_LINE + "\n   \n" + GOOD_LINE + "\n"
    for strict in (True, False):
        parsed = parse_serial_log(text, strict=strict)
        assert len(parsed.records) == 2
        assert parsed.skipped == 0


def test_parse_sequence_numbers_are_source_line_numbers():
    text = "\n".join(["", GOOD_LINE, "bad", GOOD_LINE])
    parsed = parse_serial_log(text, strict=False)
    assert [r.sequence_number for r in parsed.records] == [2, 4]


def test_parse_accepts_stream_and_line_iterable():
    text = GOOD_LINE + "\n" + GOOD_LINE
    from_text = parse_serial_log(text)
    from_stream = parse_serial_log(io.StringIO(text))
    from_lines = parse_serial_log(text.splitlines())
    assert from_text == from_stream == from_lines


def test_parse_accepts_exponent_notation():
    parsed = parse_serial_log("T=2.85e1;H=9E1;MQ3=.5;MQ4=-3.")
    (rec,) = parsed.records
    assert rec.values() == (28.5, 90.0, 0.5, -3.0)


@pytest.mark.parametrize(
    "line",
    [
        "T=28.5;H=90;MQ3=1;MQ4=2;",  # trailing separator
        "T=28.5;H=90;MQ3=1",  # missing field
        "T= 28.5;H=90;MQ3=1;MQ4=2",  # inner whitespace
        "T=nan;H=90;MQ3=1;MQ4=2",  # non-finite token
        "t=28.5;h=90;mq3=1;mq4=2",  # wrong case
        "T=28.5,H=90,MQ3=1,MQ4=2",  # wrong separator
        "H=90;T=28.5;MQ3=1;MQ4=2",  # wrong order
    ],
)
def test_parse_rejects_grammar_violations(line):
    with pytest.raises(MalformedLineError):
        parse_serial_log(line)
    assert parse_serial_log(line, strict=False).skipped == 1


def test_format_parse_round_trip_many_records():
    rng = np.random.default_rng(7)
    for i in range(1000):
        vals = rng.uniform(-1e3, 1e3, size=4)
        original = record(*(float(v) for v in vals), seq=i + 1)
        line = format_serial_record(original)
        (back,) = parse_serial_log(line).records
        # repr round-trips floats exactly, which is well inside the 1e-6
        # tolerance the grammar promises.
        for a, b in zip(original.values(), back.values()):
            assert a == b


def test_sequence_number_must_be_positive():
    with pytest.raises(DataError):
        record(25.0, 90.0, 200.0, 300.0, seq=0)


def test_record_rejects_non_finite_field():
    with pytest.raises(DataError):
        record(float("inf"), 90.0, 200.0, 300.0)


# ---------------------------------------------------------------- summaries


def test_summarize_three_record_example():
    records = [record(v, v, v, v, seq=i + 1) for i, v in enumerate((1.0, 2.0, 3.0))]
    summary = summarize_log(records)
    assert summary.count == 3
    for name in ("temperature", "humidity", "mq3", "mq4"):
        mean, std = getattr(summary, name)
        assert mean == 2.0
        assert std == 1.0


def test_summarize_matches_two_pass_oracle():
    rng = np.random.default_rng(11)
    records = [
        record(*(float(v) for v in rng.uniform(0, 400, size=4)), seq=i + 1)
        for i in range(500)
    ]
    summary = summarize_log(records)
    columns = list(zip(*(r.values() for r in records)))
    for name, column in zip(("temperature", "humidity", "mq3", "mq4"), columns):
        mean = math.fsum(column) / len(column)
        var = math.fsum((x - mean) ** 2 for x in column) / (len(column) - 1)
        got_mean, got_std = getattr(summary, name)
        assert math.isclose(got_mean, mean, rel_tol=1e-12, abs_tol=1e-12)
        assert math.isclose(got_std, math.sqrt(var), rel_tol=1e-12, abs_tol=1e-12)


@pytest.mark.parametrize("count", [0, 1])
def test_summarize_needs_two_records(count):
    records = [record(1.0, 2.0, 3.0, 4.0, seq=i + 1) for i in range(count)]
    with pytest.raises(TooFewRecordsError) as info:
        summarize_log(records)
    assert info.value.count == count


def test_summary_as_dict_shape():
    records = [record(v, v, v, v, seq=i + 1) for i, v in enumerate((1.0, 3.0))]
    out = summarize_log(records).as_dict()
    assert out["count"] == 2
    assert out["temperature"] == {"mean": 2.0, "std": pytest.approx(math.sqrt(2))}


# ---------------------------------------------------------------- ingestion


def test_log_to_dataset_emergency_example():
    parsed = parse_serial_log("T=29.0;H=93.0;MQ3=260.0;MQ4=330.0")
    dataset = log_to_dataset(parsed.records)
    ((reading, label),) = dataset.rows
    assert label is SpoilageLevel.HIGH_EMERGENCY
    assert reading.moisture == DEFAULT_MOISTURE
    assert reading.as_tuple() == (29.0, 93.0, 200.0, 260.0, 330.0)


def test_log_to_dataset_paper_order_never_reaches_emergency():
    parsed = parse_serial_log("T=29.0;H=93.0;MQ3=260.0;MQ4=330.0")
    dataset = log_to_dataset(parsed.records, order=BranchOrder.PAPER_LITERAL)
    ((_, label),) = dataset.rows
    assert label is SpoilageLevel.NO_TRACKING


def test_log_to_dataset_preserves_order_and_count():
    lines = [
        f"T={20 + i};H=50;MQ3=100;MQ4=100" for i in range(10)
    ]
    parsed = parse_serial_log("\n".join(lines))
    dataset = log_to_dataset(parsed.records)
    assert len(dataset.rows) == 10
    temps = [reading.temperature for reading, _ in dataset.rows]
    assert temps == [20.0 + i for i in range(10)]


def test_log_to_dataset_labels_match_classifier():
    rng = np.random.default_rng(3)
    lines = []
    for _ in range(50):
        t, h = rng.uniform(20, 35), rng.uniform(80, 100)
        q3, q4 = rng.uniform(200, 320), rng.uniform(280, 400)
        lines.append(f"T={t!r};H={h!r};MQ3={q3!r};MQ4={q4!r}")
    parsed = parse_serial_log("\n".join(lines))
    dataset = log_to_dataset(parsed.records)
    for reading, label in dataset.rows:
        assert label is classify_spoilage(
            reading, REALTIME_THRESHOLDS, BranchOrder.EMERGENCY_FIRST
        )


def test_log_to_dataset_default_moisture_cannot_fire_moisture_branch():
    assert DEFAULT_MOISTURE < REALTIME_THRESHOLDS.moisture


def test_log_to_dataset_provenance_carries_ranges_and_source():
    parsed = parse_serial_log(GOOD_LINE + "\nT=30.0;H=95.0;MQ3=280.0;MQ4=350.0")
    dataset = log_to_dataset(parsed.records, source="capture-01.log")
    prov = dataset.provenance
    assert prov.seed is None
    assert prov.source == "capture-01.log"
    config = prov.config
    assert config.thresholds == REALTIME_THRESHOLDS
    assert config.default_moisture == DEFAULT_MOISTURE
    # Derived ranges must cover both the data and every threshold.
    for (lo, hi), thr, reading_vals in zip(
        config.ranges.as_tuple(),
        REALTIME_THRESHOLDS.as_tuple(),
        zip(*(reading.as_tuple() for reading, _ in dataset.rows)),
    ):
        assert lo <= thr <= hi
        assert lo <= min(reading_vals) and max(reading_vals) <= hi


def test_log_to_dataset_respects_explicit_ranges():
    from spoilage_rl.domain import NormalizationRanges

    ranges = NormalizationRanges(
        temperature=(0.0, 50.0),
        humidity=(0.0, 100.0),
        moisture=(0.0, 400.0),
        mq3=(0.0, 500.0),
        mq4=(0.0, 500.0),
    )
    parsed = parse_serial_log(GOOD_LINE)
    dataset = log_to_dataset(parsed.records, ranges=ranges)
    assert dataset.provenance.config.ranges == ranges


def test_log_to_dataset_custom_thresholds_and_moisture():
    parsed = parse_serial_log("T=29.0;H=93.0;MQ3=260.0;MQ4=330.0")
    thresholds = SpoilageThresholds(
        temperature=30.0, humidity=95.0, moisture=250.0, mq3=300.0, mq4=400.0
    )
    dataset = log_to_dataset(
        parsed.records, thresholds=thresholds, default_moisture=100.0
    )
    ((reading, label),) = dataset.rows
    assert reading.moisture == 100.0
    assert label is SpoilageLevel.LOW  # nothing exceeds the raised thresholds


def test_log_to_dataset_empty_log_rejected():
    with pytest.raises(EmptyDatasetError):
        log_to_dataset(())


def test_log_to_dataset_trains_end_to_end():
    # A capture-built dataset must plug straight into the training loop.
    from spoilage_rl.agents import AgentKind, TrainConfig, evaluate_agent, train_dqn

    rng = np.random.default_rng(19)
    lines = []
    for _ in range(30):
        t, h = rng.uniform(20, 35), rng.uniform(80, 100)
        q3, q4 = rng.uniform(200, 320), rng.uniform(280, 400)
        lines.append(f"T={t!r};H={h!r};MQ3={q3!r};MQ4={q4!r}")
    dataset = log_to_dataset(parse_serial_log("\n".join(lines)).records)
    config = TrainConfig(
        kind=AgentKind.ANN, episodes=2, batch_size=8, hidden_size=8, seed=0
    )
    agent = train_dqn(dataset, config, ranges=dataset.provenance.config.ranges)
    report = evaluate_agent(agent, dataset)
    assert len(report.predictions) == 30
