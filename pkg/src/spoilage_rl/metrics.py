"""Evaluation metrics and report assembly.

Four scalar metrics (prediction accuracy, mean reward per step, loss
decrease rate, exploration decay) plus the predicted-class histogram,
assembled into a report shaped like the comparison tables the CLI prints.
Everything here is a pure function over series already collected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import EpsilonSchedule, EvalReport, TrainedAgent
from .domain import SpoilageError
from .env import N_ACTIONS

IDENTITY_TOLERANCE = 1e-12


class LengthMismatchError(SpoilageError):
    """Paired series have different lengths."""


class EmptyInputError(SpoilageError):
    """A metric over an empty series is undefined."""


class TooFewLossesError(SpoilageError):
    """loss_decrease_rate needs at least two window-means of data."""


def spoilage_accuracy(predictions, truths) -> float:
    """Fraction of predictions matching the true labels, in [0, 1]."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise LengthMismatchError(
            f"predictions shape {p.shape} vs truths shape {t.shape}"
        )
    if p.size == 0:
        raise EmptyInputError("no predictions to score")
    return float((p == t).mean())


def reward_to_step(rewards) -> float:
    """Mean reward per action step."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise EmptyInputError("no rewards recorded")
    return float(r.mean())


def loss_decrease_rate(losses, window: int = 1) -> float:
    """(mean of the first `window` losses - mean of the last `window`) / count.

    Positive when training loss fell; antisymmetric under reversing the
    series at window 1.
    """
    if window < 1:
        raise SpoilageError(f"window must be >= 1, got {window}")
    values = np.asarray(losses, dtype=np.float64)
    if values.size < 2 * window:
        raise TooFewLossesError(
            f"need at least {2 * window} losses for window {window}, got {values.size}"
        )
    head = float(values[:window].mean())
    tail = float(values[-window:].mean())
    return (head - tail) / values.size


def class_distribution(predictions) -> dict:
    """Counts per action code; every code 0-3 is present, absent ones as 0."""
    p = np.asarray(predictions, dtype=np.int64)
    counts = np.bincount(p, minlength=N_ACTIONS) if p.size else np.zeros(
        N_ACTIONS, dtype=np.int64
    )
    return {code: int(counts[code]) for code in range(N_ACTIONS)}


def exploration_decay_summary(
    schedule: EpsilonSchedule, episodes: int
) -> tuple[float, float]:
    """(decay factor, closed-form epsilon after `episodes` decays)."""
    return schedule.decay, schedule.value_after(episodes)


def identity_consistent(accuracy: float, mean_reward: float) -> bool:
    """Whether mean raw reward equals 2 * accuracy - 1.

    Both sides carry one rounding each, so the comparison allows a small
    absolute slack rather than demanding bit equality.
    """
    return abs(mean_reward - (2.0 * accuracy - 1.0)) <= IDENTITY_TOLERANCE


@dataclass(frozen=True)
class MetricsReport:
    spoilage_accuracy: float
    reward_to_step: float
    loss_decrease_rate: float | None  # None when too few losses were recorded
    exploration_decay_factor: float
    final_epsilon: float
    class_distribution: dict
    identity_consistent: bool
    episode_rewards: list
    losses: list


def build_report(
    evaluation: EvalReport, agent: TrainedAgent, window: int = 1
) -> MetricsReport:
    """Assemble every metric for one evaluated agent.

    The loss rate is omitted (None) when the agent recorded fewer than two
    window-means of losses, e.g. the Monte Carlo baseline, which has no
    loss at all.
    """
    accuracy = spoilage_accuracy(evaluation.predictions, evaluation.truths)
    mean_reward = reward_to_step(evaluation.rewards)
    losses = list(agent.losses)
    rate = loss_decrease_rate(losses, window) if len(losses) >= 2 * window else None
    schedule = agent.config.epsilon
    return MetricsReport(
        spoilage_accuracy=accuracy,
        reward_to_step=mean_reward,
        loss_decrease_rate=rate,
        exploration_decay_factor=schedule.decay,
        final_epsilon=agent.final_epsilon,
        class_distribution=class_distribution(evaluation.predictions),
        identity_consistent=identity_consistent(accuracy, mean_reward),
        episode_rewards=list(agent.episode_rewards),
        losses=losses,
    )


# ---------------------------------------------------------------------------
# serialization


def report_as_dict(report: MetricsReport) -> dict:
    """JSON-ready summary; series are kept out (they go to CSV files)."""
    out = {
        "spoilage_accuracy": report.spoilage_accuracy,
        "reward_to_step": report.reward_to_step,
        "exploration_decay_factor": report.exploration_decay_factor,
        "final_epsilon": report.final_epsilon,
        "class_distribution": {
            str(code): count for code, count in report.class_distribution.items()
        },
        "identity_consistent": report.identity_consistent,
        "episodes": len(report.episode_rewards),
        "updates": len(report.losses),
    }
    if report.loss_decrease_rate is not None:
        out["loss_decrease_rate"] = report.loss_decrease_rate
    return out


def report_as_text(report: MetricsReport) -> str:
    """Human-readable block, one metric per line."""
    rate = (
        f"{report.loss_decrease_rate:.6g}"
        if report.loss_decrease_rate is not None
        else "n/a"
    )
    dist = ", ".join(
        f"{code}: {count}" for code, count in sorted(report.class_distribution.items())
    )
    lines = [
        f"spoilage accuracy     {report.spoilage_accuracy:.4f}",
        f"reward to step        {report.reward_to_step:.4f}",
        f"loss decrease rate    {rate}",
        f"exploration decay     {report.exploration_decay_factor}",
        f"final epsilon         {report.final_epsilon:.6g}",
        f"class distribution    {{{dist}}}",
        f"identity consistent   {'yes' if report.identity_consistent else 'no'}",
    ]
    return "\n".join(lines)


def series_as_csv(values) -> str:
    """`index,value` rows with a header; floats use shortest round-trip form."""
    lines = ["index,value"]
    for index, value in enumerate(values):
        lines.append(f"{index},{float(value)!r}")
    return "\n".join(lines) + "\n"
