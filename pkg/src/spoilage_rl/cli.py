"""Command-line front end wiring every module together.

Subcommands: `datagen` writes a synthetic dataset CSV, `train` fits one
agent and leaves a run directory of artifacts, `evaluate` replays a saved
agent on new data, `compare` trains all five agents under one seed and
emits a comparison table, `ingest` converts serial captures to dataset
CSV, `actuate` replays the firmware actuation rules over a capture, and
`gradcheck` runs the finite-difference gradient audit from the shell.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 internal invariant violation. Diagnostics go to stderr; data goes to
files or stdout. Options resolve flag > config file > built-in default;
the config file is flat `key = value` text with `#` comments.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agents import (
    AgentKind,
    EpsilonSchedule,
    McConfig,
    McPolicy,
    TrainConfig,
    TrainedAgent,
    evaluate_agent,
    train_dqn,
    train_monte_carlo,
)
from .domain import (
    FIELD_NAMES,
    DataError,
    LabeledDataset,
    NormalizationRanges,
    SpoilageError,
)
from .hardware import (
    actuate,
    log_to_dataset,
    parse_serial_log,
    summarize_log,
)
from .metrics import (
    build_report,
    report_as_dict,
    report_as_text,
    series_as_csv,
)
from .nnet import (
    InputLayout,
    Topology,
    TransitionBatch,
    build_qnet,
    encode_observations,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .rules import BranchOrder, ShapingConfig, ShapingMode
from .synthgen import CSV_HEADER, GenConfig, generate_dataset, read_dataset_csv, write_dataset_csv

ARTIFACT_VERSION = "1"

MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.json"
REWARD_SERIES_FILE = "reward_series.csv"
LOSS_SERIES_FILE = "loss_series.csv"
CLASS_DISTRIBUTION_FILE = "class_distribution.json"
AGENT_FILE = "agent.json"
CHECKPOINT_FILE = "checkpoint.npz"
MC_POLICY_FILE = "mc_policy.json"
COMPARISON_FILE = "comparison.json"

GRADCHECK_THRESHOLD = 1e-4

# Canonical CLI spelling -> agent kind, in the fixed comparison order.
AGENT_SPELLINGS = {
    "hybrid": AgentKind.HYBRID,
    "lstm": AgentKind.LSTM_ONLY,
    "rnn": AgentKind.RNN_ONLY,
    "ann": AgentKind.ANN,
    "mc": AgentKind.MONTE_CARLO,
}
_KIND_TO_SPELLING = {kind: spelling for spelling, kind in AGENT_SPELLINGS.items()}

_GRADCHECK_TOPOLOGIES = {
    "hybrid": Topology.HYBRID,
    "lstm": Topology.LSTM_ONLY,
    "rnn": Topology.RNN_ONLY,
    "ann": Topology.ANN,
}

EPISODES_DEFAULT_SYNTHETIC = 1000
EPISODES_DEFAULT_INGESTED = 100


class UsageError(SpoilageError):
    """Bad command line or config file key; maps to exit code 1."""


class _ExitRequest(Exception):
    """argparse asked to stop (e.g. --help); carries the exit code."""

    def __init__(self, code):
        self.code = int(code)
        super().__init__(f"exit {code}")


class _Parser(argparse.ArgumentParser):
    # argparse wants to sys.exit(2) on errors; route through our codes.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise _ExitRequest(status)


# ---------------------------------------------------------------------------
# config file


_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


def read_config_file(path) -> dict:
    """Parse a flat `key = value` file into a string->string map.

    Blank lines and `#` comments are ignored. Keys use the canonical flag
    spellings without the leading dashes. Unknown keys are rejected and
    every value must parse for its key, even when a flag overrides it,
    so a typo cannot silently fall back to a default.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    values = {}
    for line_number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(
                f"{path}:{line_number}: expected 'key = value', got {raw!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_CONVERTERS:
            raise DataError(f"{path}:{line_number}: unknown config key {key!r}")
        if not value:
            raise DataError(f"{path}:{line_number}: empty value for {key!r}")
        _CONFIG_CONVERTERS[key](value, key)
        values[key] = value
    return values


def _convert_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"config key {key!r}: expected an integer, got {value!r}")


def _convert_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"config key {key!r}: expected a number, got {value!r}")


def _convert_bool(value: str, key: str) -> bool:
    word = value.lower()
    if word in _TRUE_WORDS:
        return True
    if word in _FALSE_WORDS:
        return False
    raise DataError(f"config key {key!r}: expected true/false, got {value!r}")


def _convert_choice(choices):
    def convert(value: str, key: str):
        if value not in choices:
            allowed = "|".join(sorted(choices))
            raise DataError(f"config key {key!r}: expected {allowed}, got {value!r}")
        return value

    return convert


def _convert_str(value: str, key: str) -> str:
    return value


_CONFIG_CONVERTERS = {
    "rows": _convert_int,
    "seed": _convert_int,
    "out": _convert_str,
    "data": _convert_str,
    "model": _convert_str,
    "agent": _convert_choice(set(AGENT_SPELLINGS)),
    "episodes": _convert_int,
    "gamma": _convert_float,
    "batch-size": _convert_int,
    "epsilon-decay": _convert_float,
    "epsilon-floor": _convert_float,
    "shaping": _convert_choice({"raw", "log"}),
    "branch-order": _convert_choice({"paper", "emergency-first"}),
    "strict": _convert_bool,
    "stats": _convert_bool,
}


class _Options:
    """Flag > config file > default resolution for one invocation."""

    def __init__(self, args, config: dict):
        self._args = args
        self._config = config

    def get(self, key: str, convert, default):
        flag_value = getattr(self._args, key.replace("-", "_"), None)
        if flag_value is not None:
            return flag_value
        if key in self._config:
            return convert(self._config[key], key)
        return default


# ---------------------------------------------------------------------------
# small io helpers


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, payload) -> None:
    _write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_input_text(data: str | None) -> str:
    """Read a --data argument: a path, or stdin when absent or '-'."""
    if data is None or data == "-":
        return sys.stdin.read()
    path = Path(data)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    return path.read_text()


def _prepare_run_dir(out: str | None) -> Path:
    if out is None:
        raise UsageError("--out is required: name the run directory")
    path = Path(out)
    if path.exists():
        if not path.is_dir():
            raise DataError(f"output path exists and is not a directory: {path}")
        if any(path.iterdir()):
            raise DataError(f"refusing to reuse non-empty run directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _relative_to_run(path: str | Path, run_dir: Path) -> str:
    return os.path.relpath(Path(path).resolve(), run_dir.resolve())


# ---------------------------------------------------------------------------
# dataset loading (CSV or serial log)


def _load_dataset(data: str | None, order: BranchOrder, strict: bool):
    """Load --data as a dataset CSV or a raw serial capture.

    Returns (dataset, ingested): `ingested` is True when the file was a
    serial log, which switches the episode default from 1000 to 100.
    The format is sniffed from the first non-blank line, so captures can
    be trained on directly without a separate ingest step.
    """
    if data is None:
        raise UsageError("--data is required: point at a dataset CSV or serial log")
    path = Path(data)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    text = path.read_text()
    first = next((line.strip() for line in text.splitlines() if line.strip()), "")
    if not first:
        raise DataError(f"dataset file is empty: {path}")
    if first == CSV_HEADER:
        return read_dataset_csv(path), False
    parsed = parse_serial_log(text, strict=strict)
    if parsed.skipped:
        print(
            f"warning: skipped {parsed.skipped} malformed line(s) in {path}",
            file=sys.stderr,
        )
    dataset = log_to_dataset(parsed.records, order=order, source=str(path))
    return dataset, True


def _training_ranges(dataset: LabeledDataset) -> NormalizationRanges | None:
    """Ranges an ingested dataset carries; None lets training use defaults."""
    config = dataset.provenance.config
    return getattr(config, "ranges", None)


# ---------------------------------------------------------------------------
# agent serialization (agent.json + checkpoint/policy file)


def _ranges_to_jsonable(ranges: NormalizationRanges) -> dict:
    return {
        name: list(pair) for name, pair in zip(FIELD_NAMES, ranges.as_tuple())
    }


def _ranges_from_jsonable(payload: dict) -> NormalizationRanges:
    return NormalizationRanges(
        **{name: tuple(payload[name]) for name in FIELD_NAMES}
    )


def _epsilon_to_jsonable(schedule: EpsilonSchedule) -> dict:
    return {
        "initial": schedule.initial,
        "decay": schedule.decay,
        "floor": schedule.floor,
    }


def _epsilon_from_jsonable(payload: dict) -> EpsilonSchedule:
    return EpsilonSchedule(**payload)


def _train_config_to_jsonable(config: TrainConfig) -> dict:
    return {
        "kind": config.kind.value,
        "episodes": config.episodes,
        "batch_size": config.batch_size,
        "gamma": config.gamma,
        "learning_rate": config.learning_rate,
        "optimizer": config.optimizer,
        "shaping_mode": config.shaping.mode.value,
        "shaping_floor_epsilon": config.shaping.floor_epsilon,
        "seed": config.seed,
        "input_layout": config.input_layout.value,
        "window": config.window,
        "hidden_size": config.hidden_size,
        "replay_capacity": config.replay_capacity,
        "updates_per_step": config.updates_per_step,
        "min_buffer_fill": config.min_buffer_fill,
        "epsilon": _epsilon_to_jsonable(config.epsilon),
        "max_steps_per_episode": config.max_steps_per_episode,
    }


def _train_config_from_jsonable(payload: dict) -> TrainConfig:
    return TrainConfig(
        kind=AgentKind(payload["kind"]),
        episodes=payload["episodes"],
        batch_size=payload["batch_size"],
        gamma=payload["gamma"],
        learning_rate=payload["learning_rate"],
        optimizer=payload["optimizer"],
        shaping=ShapingConfig(
            mode=ShapingMode(payload["shaping_mode"]),
            floor_epsilon=payload["shaping_floor_epsilon"],
        ),
        seed=payload["seed"],
        input_layout=InputLayout(payload["input_layout"]),
        window=payload["window"],
        hidden_size=payload["hidden_size"],
        replay_capacity=payload["replay_capacity"],
        updates_per_step=payload["updates_per_step"],
        min_buffer_fill=payload["min_buffer_fill"],
        epsilon=_epsilon_from_jsonable(payload["epsilon"]),
        max_steps_per_episode=payload["max_steps_per_episode"],
    )


def _mc_config_to_jsonable(config: McConfig) -> dict:
    return {
        "bins": config.bins,
        "gamma": config.gamma,
        "epsilon": _epsilon_to_jsonable(config.epsilon),
        "first_visit": config.first_visit,
        "episodes": config.episodes,
        "seed": config.seed,
    }


def _mc_config_from_jsonable(payload: dict) -> McConfig:
    payload = dict(payload)
    payload["epsilon"] = _epsilon_from_jsonable(payload["epsilon"])
    return McConfig(**payload)


def _save_mc_policy(policy: McPolicy, path: Path) -> None:
    table = {
        ",".join(str(int(part)) for part in key): [float(v) for v in values]
        for key, values in sorted(policy.q.items())
    }
    _write_json(path, {"bins": policy.bins, "q": table})


def _load_mc_policy(path: Path) -> McPolicy:
    try:
        payload = json.loads(path.read_text())
        table = {
            tuple(int(part) for part in key.split(",")): np.asarray(
                values, dtype=np.float64
            )
            for key, values in payload["q"].items()
        }
        return McPolicy(bins=int(payload["bins"]), q=table)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read policy file {path}: {exc}") from exc


def _save_agent(agent: TrainedAgent, run_dir: Path) -> str:
    """Persist the model plus everything needed to rebuild it for evaluate."""
    if agent.kind is AgentKind.MONTE_CARLO:
        model_file = MC_POLICY_FILE
        _save_mc_policy(agent.parameters, run_dir / model_file)
        config_payload = _mc_config_to_jsonable(agent.config)
    else:
        model_file = CHECKPOINT_FILE
        save_checkpoint(agent.parameters, run_dir / model_file)
        config_payload = _train_config_to_jsonable(agent.config)
    _write_json(
        run_dir / AGENT_FILE,
        {
            "artifact_version": ARTIFACT_VERSION,
            "kind": _KIND_TO_SPELLING[agent.kind],
            "final_epsilon": agent.final_epsilon,
            "ranges": _ranges_to_jsonable(agent.ranges),
            "train_config": config_payload,
            "model_file": model_file,
        },
    )
    return model_file


def _load_agent(model: str | None) -> TrainedAgent:
    """Rebuild a TrainedAgent from a run directory or an agent.json path."""
    if model is None:
        raise UsageError("--model is required: a run directory or agent.json")
    path = Path(model)
    if path.is_dir():
        path = path / AGENT_FILE
    if not path.is_file():
        raise DataError(f"agent description not found: {path}")
    try:
        payload = json.loads(path.read_text())
        spelling = payload["kind"]
        kind = AGENT_SPELLINGS[spelling]
        model_path = path.parent / payload["model_file"]
        if kind is AgentKind.MONTE_CARLO:
            parameters = _load_mc_policy(model_path)
            config = _mc_config_from_jsonable(payload["train_config"])
        else:
            parameters = load_checkpoint(model_path)
            config = _train_config_from_jsonable(payload["train_config"])
        return TrainedAgent(
            kind=kind,
            parameters=parameters,
            episode_rewards=[],
            losses=[],
            epsilons=[],
            final_epsilon=payload["final_epsilon"],
            config=config,
            ranges=_ranges_from_jsonable(payload["ranges"]),
        )
    except DataError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load agent from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# run manifest


@dataclass(frozen=True)
class RunManifest:
    """Provenance sidecar written atomically as a run's final artifact."""

    command: tuple
    config: dict
    seed: int | None
    paths: dict
    duration_seconds: float
    artifact_version: str = ARTIFACT_VERSION

    def as_dict(self) -> dict:
        return {
            "artifact_version": self.artifact_version,
            "command": list(self.command),
            "config": self.config,
            "seed": self.seed,
            "paths": self.paths,
            "duration_seconds": self.duration_seconds,
        }


def _write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    _write_json(run_dir / MANIFEST_FILE, manifest.as_dict())


# ---------------------------------------------------------------------------
# shared train/evaluate plumbing


def _build_train_config(kind: AgentKind, opts: "_TrainOptions"):
    epsilon = EpsilonSchedule(decay=opts.epsilon_decay, floor=opts.epsilon_floor)
    if kind is AgentKind.MONTE_CARLO:
        return McConfig(
            gamma=opts.gamma,
            epsilon=epsilon,
            episodes=opts.episodes,
            seed=opts.seed,
        )
    return TrainConfig(
        kind=kind,
        episodes=opts.episodes,
        batch_size=opts.batch_size,
        gamma=opts.gamma,
        shaping=ShapingConfig(mode=opts.shaping),
        seed=opts.seed,
        epsilon=epsilon,
    )


def _train_one(kind: AgentKind, dataset, ranges, opts) -> TrainedAgent:
    config = _build_train_config(kind, opts)
    if kind is AgentKind.MONTE_CARLO:
        return train_monte_carlo(dataset, config, ranges=ranges)
    return train_dqn(dataset, config, ranges=ranges)


def _write_run_artifacts(run_dir: Path, agent: TrainedAgent, report) -> dict:
    """Write the per-run report files; returns their manifest path map."""
    paths = {}
    _write_json(run_dir / METRICS_FILE, report_as_dict(report))
    paths["metrics"] = METRICS_FILE
    _write_text_atomic(
        run_dir / REWARD_SERIES_FILE, series_as_csv(report.episode_rewards)
    )
    paths["reward_series"] = REWARD_SERIES_FILE
    if report.losses:
        _write_text_atomic(run_dir / LOSS_SERIES_FILE, series_as_csv(report.losses))
        paths["loss_series"] = LOSS_SERIES_FILE
    _write_json(
        run_dir / CLASS_DISTRIBUTION_FILE,
        {str(code): count for code, count in report.class_distribution.items()},
    )
    paths["class_distribution"] = CLASS_DISTRIBUTION_FILE
    paths["model"] = _save_agent(agent, run_dir)
    paths["agent"] = AGENT_FILE
    return paths


@dataclass(frozen=True)
class _TrainOptions:
    agent: str
    episodes: int
    gamma: float
    batch_size: int
    epsilon_decay: float
    epsilon_floor: float
    shaping: ShapingMode
    branch_order: BranchOrder
    strict: bool
    seed: int

    def snapshot(self) -> dict:
        return {
            "agent": self.agent,
            "episodes": self.episodes,
            "gamma": self.gamma,
            "batch-size": self.batch_size,
            "epsilon-decay": self.epsilon_decay,
            "epsilon-floor": self.epsilon_floor,
            "shaping": self.shaping.value,
            "branch-order": self.branch_order.value,
            "strict": self.strict,
            "seed": self.seed,
        }


def _resolve_train_options(opts: _Options, ingested: bool, agent: str) -> _TrainOptions:
    default_episodes = (
        EPISODES_DEFAULT_INGESTED if ingested else EPISODES_DEFAULT_SYNTHETIC
    )
    return _TrainOptions(
        agent=agent,
        episodes=opts.get("episodes", _convert_int, default_episodes),
        gamma=opts.get("gamma", _convert_float, 0.95),
        batch_size=opts.get("batch-size", _convert_int, 64),
        epsilon_decay=opts.get("epsilon-decay", _convert_float, 0.9997),
        epsilon_floor=opts.get("epsilon-floor", _convert_float, 0.01),
        shaping=ShapingMode(opts.get("shaping", _convert_choice({"raw", "log"}), "raw")),
        branch_order=_branch_order(opts),
        strict=opts.get("strict", _convert_bool, False),
        seed=opts.get("seed", _convert_int, 0),
    )


def _branch_order(opts: _Options) -> BranchOrder:
    value = opts.get(
        "branch-order",
        _convert_choice({"paper", "emergency-first"}),
        "emergency-first",
    )
    return BranchOrder(value)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_datagen(args) -> int:
    opts = _Options(args, _config_of(args))
    rows = opts.get("rows", _convert_int, 1000)
    seed = opts.get("seed", _convert_int, 0)
    order = _branch_order(opts)
    out = opts.get("out", _convert_str, None)
    config = GenConfig(row_count=rows, seed=seed, branch_order=order)
    dataset = generate_dataset(config)
    if out is None:
        write_dataset_csv(dataset, sys.stdout)
    else:
        byte_count = write_dataset_csv(dataset, out)
        print(f"wrote {rows} rows ({byte_count} bytes) to {out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    started = time.perf_counter()
    opts = _Options(args, _config_of(args))
    agent_spelling = opts.get(
        "agent", _convert_choice(set(AGENT_SPELLINGS)), "hybrid"
    )
    data = opts.get("data", _convert_str, None)
    strict = opts.get("strict", _convert_bool, False)
    # Load data before touching the output directory so a bad path leaves
    # no half-made run behind.
    dataset, ingested = _load_dataset(data, _branch_order(opts), strict)
    resolved = _resolve_train_options(opts, ingested, agent_spelling)
    run_dir = _prepare_run_dir(opts.get("out", _convert_str, None))

    ranges = _training_ranges(dataset)
    agent = _train_one(AGENT_SPELLINGS[agent_spelling], dataset, ranges, resolved)
    evaluation = evaluate_agent(agent, dataset)
    report = build_report(evaluation, agent)

    paths = _write_run_artifacts(run_dir, agent, report)
    paths["data"] = _relative_to_run(data, run_dir)
    _write_manifest(
        run_dir,
        RunManifest(
            command=tuple(args.command_echo),
            config=resolved.snapshot(),
            seed=resolved.seed,
            paths=paths,
            duration_seconds=time.perf_counter() - started,
        ),
    )
    print(report_as_text(report))
    return 0


def _cmd_evaluate(args) -> int:
    started = time.perf_counter()
    opts = _Options(args, _config_of(args))
    strict = opts.get("strict", _convert_bool, False)
    order = _branch_order(opts)
    agent = _load_agent(opts.get("model", _convert_str, None))
    data = opts.get("data", _convert_str, None)
    dataset, _ = _load_dataset(data, order, strict)
    run_dir = _prepare_run_dir(opts.get("out", _convert_str, None))

    evaluation = evaluate_agent(agent, dataset)
    report = build_report(evaluation, agent)

    paths = {}
    _write_json(run_dir / METRICS_FILE, report_as_dict(report))
    paths["metrics"] = METRICS_FILE
    # For a pure evaluation the reward series is per evaluation step.
    _write_text_atomic(
        run_dir / REWARD_SERIES_FILE, series_as_csv(evaluation.rewards)
    )
    paths["reward_series"] = REWARD_SERIES_FILE
    _write_json(
        run_dir / CLASS_DISTRIBUTION_FILE,
        {str(code): count for code, count in report.class_distribution.items()},
    )
    paths["class_distribution"] = CLASS_DISTRIBUTION_FILE
    paths["data"] = _relative_to_run(data, run_dir)
    paths["model"] = _relative_to_run(opts.get("model", _convert_str, None), run_dir)
    _write_manifest(
        run_dir,
        RunManifest(
            command=tuple(args.command_echo),
            config={
                "agent": _KIND_TO_SPELLING[agent.kind],
                "branch-order": order.value,
                "strict": strict,
            },
            seed=None,
            paths=paths,
            duration_seconds=time.perf_counter() - started,
        ),
    )
    print(report_as_text(report))
    return 0


_COMPARE_COLUMNS = (
    "agent",
    "accuracy",
    "reward/step",
    "loss-rate",
    "eps-decay",
    "final-eps",
    "classes 0/1/2/3",
)


def _comparison_row(spelling: str, agent: TrainedAgent, report) -> dict:
    return {
        "agent": spelling,
        "accuracy": report.spoilage_accuracy,
        "reward_to_step": report.reward_to_step,
        "loss_decrease_rate": report.loss_decrease_rate,
        "exploration_decay_factor": report.exploration_decay_factor,
        "final_epsilon": report.final_epsilon,
        "class_distribution": {
            str(code): count for code, count in report.class_distribution.items()
        },
    }


def _format_comparison_table(rows) -> str:
    def cell(row, column):
        if column == "agent":
            return row["agent"]
        if column == "accuracy":
            return f"{row['accuracy']:.4f}"
        if column == "reward/step":
            return f"{row['reward_to_step']:.4f}"
        if column == "loss-rate":
            rate = row["loss_decrease_rate"]
            return "n/a" if rate is None else f"{rate:.3e}"
        if column == "eps-decay":
            return f"{row['exploration_decay_factor']:.4f}"
        if column == "final-eps":
            return f"{row['final_epsilon']:.4f}"
        dist = row["class_distribution"]
        return "/".join(str(dist[str(code)]) for code in range(4))

    table = [list(_COMPARE_COLUMNS)]
    table.extend([cell(row, column) for column in _COMPARE_COLUMNS] for row in rows)
    widths = [max(len(line[i]) for line in table) for i in range(len(_COMPARE_COLUMNS))]
    lines = [
        "  ".join(value.ljust(width) for value, width in zip(line, widths)).rstrip()
        for line in table
    ]
    return "\n".join(lines)


def _cmd_compare(args) -> int:
    started = time.perf_counter()
    opts = _Options(args, _config_of(args))
    data = opts.get("data", _convert_str, None)
    strict = opts.get("strict", _convert_bool, False)
    dataset, ingested = _load_dataset(data, _branch_order(opts), strict)
    run_dir = _prepare_run_dir(opts.get("out", _convert_str, None))
    ranges = _training_ranges(dataset)

    rows = []
    paths = {}
    # Every agent trains under the same seed and data: identical conditions,
    # differing only in architecture.
    for spelling, kind in AGENT_SPELLINGS.items():
        resolved = _resolve_train_options(opts, ingested, spelling)
        agent = _train_one(kind, dataset, ranges, resolved)
        evaluation = evaluate_agent(agent, dataset)
        report = build_report(evaluation, agent)
        rows.append(_comparison_row(spelling, agent, report))
        agent_dir = run_dir / "agents" / spelling
        agent_dir.mkdir(parents=True)
        agent_paths = _write_run_artifacts(agent_dir, agent, report)
        for name, rel in agent_paths.items():
            paths[f"{spelling}/{name}"] = f"agents/{spelling}/{rel}"

    shared = _resolve_train_options(opts, ingested, "all")
    comparison = {
        "artifact_version": ARTIFACT_VERSION,
        "seed": shared.seed,
        "episodes": shared.episodes,
        "agents": rows,
    }
    _write_json(run_dir / COMPARISON_FILE, comparison)
    paths["comparison"] = COMPARISON_FILE
    paths["data"] = _relative_to_run(data, run_dir)
    snapshot = shared.snapshot()
    del snapshot["agent"]
    _write_manifest(
        run_dir,
        RunManifest(
            command=tuple(args.command_echo),
            config=snapshot,
            seed=shared.seed,
            paths=paths,
            duration_seconds=time.perf_counter() - started,
        ),
    )
    print(_format_comparison_table(rows))
    return 0


def _cmd_ingest(args) -> int:
    opts = _Options(args, _config_of(args))
    strict = opts.get("strict", _convert_bool, False)
    stats = opts.get("stats", _convert_bool, False)
    order = _branch_order(opts)
    data = opts.get("data", _convert_str, None)
    out = opts.get("out", _convert_str, None)
    text = _read_input_text(data)
    parsed = parse_serial_log(text, strict=strict)
    if parsed.skipped:
        print(
            f"warning: skipped {parsed.skipped} malformed line(s)", file=sys.stderr
        )
    source = data if data not in (None, "-") else "<stdin>"
    dataset = log_to_dataset(parsed.records, order=order, source=source)

    stats_text = None
    if stats:
        summary = summarize_log(parsed.records)
        lines = [f"records {summary.count}"]
        for name in ("temperature", "humidity", "mq3", "mq4"):
            mean, std = getattr(summary, name)
            lines.append(f"{name} mean {mean:.6g} std {std:.6g}")
        stats_text = "\n".join(lines)

    if out is not None:
        byte_count = write_dataset_csv(dataset, out)
        print(
            f"wrote {len(dataset.rows)} rows ({byte_count} bytes) to {out}",
            file=sys.stderr,
        )
        if stats_text:
            print(stats_text)
    elif stats_text:
        # Stats-only mode: the summary is the output.
        print(stats_text)
    else:
        write_dataset_csv(dataset, sys.stdout)
    return 0


def _cmd_actuate(args) -> int:
    opts = _Options(args, _config_of(args))
    strict = opts.get("strict", _convert_bool, False)
    text = _read_input_text(opts.get("data", _convert_str, None))
    parsed = parse_serial_log(text, strict=strict)
    if parsed.skipped:
        print(
            f"warning: skipped {parsed.skipped} malformed line(s)", file=sys.stderr
        )
    for record in parsed.records:
        state = actuate(record)
        flags = " ".join(
            f"led{i}={'on' if lit else 'off'}"
            for i, lit in enumerate((state.led1, state.led2, state.led3), start=1)
        )
        print(f"seq={record.sequence_number} servo={state.servo_angle} {flags}")
    return 0


def _cmd_gradcheck(args) -> int:
    opts = _Options(args, _config_of(args))
    agent = opts.get("agent", _convert_choice(set(_GRADCHECK_TOPOLOGIES)), "hybrid")
    seed = opts.get("seed", _convert_int, 0)
    batch_size = opts.get("batch-size", _convert_int, 4)
    gamma = opts.get("gamma", _convert_float, 0.95)
    if batch_size < 1:
        raise DataError(f"batch-size must be >= 1, got {batch_size}")

    rng = np.random.default_rng(seed)
    net = build_qnet(
        topology=_GRADCHECK_TOPOLOGIES[agent],
        input_size=1,
        hidden_size=64,
        seq_len=5,
        n_actions=4,
        rng=rng,
    )
    obs = encode_observations(rng.random((batch_size, 5)))
    next_obs = encode_observations(rng.random((batch_size, 5)))
    batch = TransitionBatch(
        obs=obs,
        actions=rng.integers(0, 4, size=batch_size),
        rewards=rng.choice(np.array([-1.0, 1.0]), size=batch_size),
        next_obs=next_obs,
        done=(rng.random(batch_size) < 0.2).astype(np.float64),
    )
    error = grad_check(net, batch, gamma=gamma)
    passed = error < GRADCHECK_THRESHOLD
    verdict = "PASS" if passed else "FAIL"
    print(
        f"{agent}: max relative gradient error {error:.3e} "
        f"(threshold {GRADCHECK_THRESHOLD:.0e}): {verdict}"
    )
    if passed:
        return 0
    # A failed audit means the backward pass violates its own math.
    print("gradient audit failed", file=sys.stderr)
    return 3


# ---------------------------------------------------------------------------
# parser assembly


def _config_of(args) -> dict:
    if getattr(args, "config", None):
        return read_config_file(args.config)
    return {}


def _add_common(parser: _Parser, *names) -> None:
    specs = {
        "config": dict(metavar="FILE", help="flat key = value config file"),
        "seed": dict(type=int, help="RNG seed (default 0)"),
        "out": dict(help="output file or run directory"),
        "data": dict(help="input dataset CSV or serial log ('-' for stdin)"),
        "model": dict(help="run directory or agent.json from a train run"),
        "rows": dict(type=int, help="synthetic rows to generate (default 1000)"),
        "agent": dict(
            choices=sorted(AGENT_SPELLINGS),
            help="agent architecture",
        ),
        "episodes": dict(
            type=int, help="training episodes (default 1000; 100 for ingested logs)"
        ),
        "gamma": dict(type=float, help="discount factor (default 0.95)"),
        "batch-size": dict(type=int, help="replay batch size (default 64)"),
        "epsilon-decay": dict(
            type=float, help="per-episode epsilon decay factor (default 0.9997)"
        ),
        "epsilon-floor": dict(type=float, help="epsilon floor (default 0.01)"),
        "shaping": dict(choices=["raw", "log"], help="reward shaping (default raw)"),
        "branch-order": dict(
            choices=["paper", "emergency-first"],
            help="classifier branch order (default emergency-first)",
        ),
        "strict": dict(
            action="store_true",
            default=None,
            help="fail on malformed serial-log lines instead of skipping",
        ),
        "stats": dict(
            action="store_true",
            default=None,
            help="print per-field mean and standard deviation",
        ),
    }
    for name in names:
        parser.add_argument(f"--{name}", **specs[name])


def build_parser() -> _Parser:
    parser = _Parser(
        prog="spoilage-rl",
        description="Spoilage-sensor RL workbench: data, training, comparison, ingestion.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    datagen = sub.add_parser("datagen", help="generate a synthetic dataset CSV")
    _add_common(datagen, "rows", "seed", "out", "branch-order", "config")
    datagen.set_defaults(handler=_cmd_datagen)

    train = sub.add_parser("train", help="train one agent into a run directory")
    _add_common(
        train,
        "data",
        "agent",
        "episodes",
        "gamma",
        "batch-size",
        "epsilon-decay",
        "epsilon-floor",
        "shaping",
        "branch-order",
        "seed",
        "out",
        "strict",
        "config",
    )
    train.set_defaults(handler=_cmd_train)

    evaluate = sub.add_parser("evaluate", help="replay a trained agent on a dataset")
    _add_common(evaluate, "model", "data", "out", "branch-order", "strict", "config")
    evaluate.set_defaults(handler=_cmd_evaluate)

    compare = sub.add_parser("compare", help="train and score all five agents")
    _add_common(
        compare,
        "data",
        "episodes",
        "gamma",
        "batch-size",
        "epsilon-decay",
        "epsilon-floor",
        "shaping",
        "branch-order",
        "seed",
        "out",
        "strict",
        "config",
    )
    compare.set_defaults(handler=_cmd_compare)

    ingest = sub.add_parser("ingest", help="convert a serial log to dataset CSV")
    _add_common(
        ingest, "data", "out", "branch-order", "strict", "stats", "config"
    )
    ingest.set_defaults(handler=_cmd_ingest)

    actuate_cmd = sub.add_parser(
        "actuate", help="replay firmware actuation over a serial log"
    )
    _add_common(actuate_cmd, "data", "strict", "config")
    actuate_cmd.set_defaults(handler=_cmd_actuate)

    gradcheck = sub.add_parser(
        "gradcheck", help="finite-difference audit of the backward pass"
    )
    # Monte Carlo has no gradients to audit, so its spelling is not a choice.
    gradcheck.add_argument(
        "--agent",
        choices=sorted(_GRADCHECK_TOPOLOGIES),
        help="network architecture to audit",
    )
    _add_common(gradcheck, "seed", "batch-size", "gamma", "config")
    gradcheck.set_defaults(handler=_cmd_gradcheck)

    return parser


def run_cli(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "handler", None) is None:
            parser.error("a subcommand is required")
        args.command_echo = argv
        return args.handler(args)
    except _ExitRequest as request:
        return request.code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0
    except SpoilageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive catch-all
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
