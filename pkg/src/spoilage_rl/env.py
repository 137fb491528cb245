"""Sequential MDP environment over a labeled dataset, plus a value-iteration
oracle for the exogenous-transition chain.

The environment walks the dataset in order regardless of actions; the reward
at step t is +1 when the action matches row t's label, -1 otherwise (shaped
if configured). Because transitions are exogenous, the optimal policy is the
per-step reward argmax, i.e. the label sequence itself -- which is what the
oracle recovers for any discount.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    DataError,
    LabeledDataset,
    NormalizationRanges,
    SpoilageError,
    SpoilageLevel,
)
from .rules import ShapingConfig, ShapingMode, shape_reward

N_ACTIONS = 4


class SteppedAfterDoneError(SpoilageError):
    """step() was called on a finished episode."""


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: SpoilageLevel


class SpoilageEnv:
    """Dataset-backed environment with a mutable cursor.

    Precomputes the normalized observation matrix and the per-(row, action)
    reward table once; `observations`, `labels` and `reward_table` are exposed
    read-only so training loops can batch over them without re-stepping.
    """

    def __init__(
        self,
        dataset: LabeledDataset,
        ranges: NormalizationRanges,
        shaping: ShapingConfig | None = None,
    ):
        self.dataset = dataset
        self.ranges = ranges
        self.shaping = shaping if shaping is not None else ShapingConfig()

        raw = np.asarray(
            [r.as_tuple() for r in dataset.readings()], dtype=np.float64
        )
        pairs = ranges.as_tuple()
        lo = np.asarray([p[0] for p in pairs])
        hi = np.asarray([p[1] for p in pairs])
        obs = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
        obs.flags.writeable = False
        self.observations = obs

        labels = np.asarray([int(lvl) for lvl in dataset.labels()], dtype=np.int64)
        labels.flags.writeable = False
        self.labels = labels

        n = len(dataset)
        table = np.full((n, N_ACTIONS), -1.0)
        table[np.arange(n), labels] = 1.0
        if self.shaping.mode is not ShapingMode.RAW:
            flat = np.asarray(
                [shape_reward(v, self.shaping) for v in (-1.0, 1.0)]
            )
            table = np.where(table > 0, flat[1], flat[0])
        table.flags.writeable = False
        self.reward_table = table

        self._cursor = 0
        self._done = False

    @property
    def row_count(self) -> int:
        return len(self.dataset)

    @property
    def current_step(self) -> int:
        return self._cursor

    @property
    def done(self) -> bool:
        return self._done

    def reset(self) -> np.ndarray:
        self._cursor = 0
        self._done = False
        return self.observations[0]

    def step(self, action: SpoilageLevel | int) -> StepResult:
        if self._done:
            raise SteppedAfterDoneError("episode finished; call reset()")
        a = int(action)
        if not 0 <= a < N_ACTIONS:
            raise DataError(f"action must be in 0-3, got {action!r}")
        t = self._cursor
        reward = float(self.reward_table[t, a])
        true_level = SpoilageLevel(int(self.labels[t]))
        self._cursor = t + 1
        self._done = self._cursor >= self.row_count
        obs_index = min(self._cursor, self.row_count - 1)
        return StepResult(
            observation=self.observations[obs_index],
            reward=reward,
            done=self._done,
            info=true_level,
        )


@dataclass(frozen=True)
class ChainMdpModel:
    """Deterministic chain: state t moves to t+1 whatever the action.

    reward_table holds raw +/-1 entries, exactly one +1 per row (the label).
    """

    reward_table: np.ndarray
    gamma: float
    terminal_index: int

    @classmethod
    def from_dataset(cls, dataset: LabeledDataset, gamma: float) -> "ChainMdpModel":
        if not 0.0 <= gamma < 1.0:
            raise DataError(f"gamma must be in [0, 1), got {gamma}")
        n = len(dataset)
        labels = np.asarray([int(lvl) for lvl in dataset.labels()])
        table = np.full((n, N_ACTIONS), -1.0)
        table[np.arange(n), labels] = 1.0
        table.flags.writeable = False
        return cls(reward_table=table, gamma=gamma, terminal_index=n)


def value_iteration_oracle(
    dataset: LabeledDataset, gamma: float, tolerance: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the chain MDP by synchronous Q-iteration on raw rewards.

    Returns (policy, q_table): policy[t] is the greedy action at step t
    (lowest index on ties), q_table is (rows, 4). Iterates until the largest
    Q change falls below `tolerance`. The greedy policy always equals the
    label sequence and is independent of gamma.
    """
    if tolerance <= 0:
        raise DataError(f"tolerance must be > 0, got {tolerance}")
    model = ChainMdpModel.from_dataset(dataset, gamma)
    r = model.reward_table
    n = r.shape[0]
    q = np.zeros_like(r)
    while True:
        nxt = np.empty(n)
        nxt[: n - 1] = q[1:].max(axis=1)
        nxt[n - 1] = 0.0  # beyond the final row the episode is over
        q_new = r + gamma * nxt[:, None]
        delta = np.abs(q_new - q).max()
        q = q_new
        if delta < tolerance:
            break
    policy = q.argmax(axis=1)
    return policy, q
