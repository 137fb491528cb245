"""Agents over the spoilage environment: deep Q-learning in four network
shapes and a binned tabular Monte Carlo control baseline.

The DQN loop is the usual replay recipe: epsilon-greedy behavior, FIFO
experience buffer, uniform batch sampling, one TD update per environment
step once the buffer has warmed up. Update math runs in float32 against
float64 master weights; only the optimizer touches the masters, so the
public parameters stay double precision throughout.

The Monte Carlo agent discretizes each normalized feature into equal-width
bins and keeps a running mean of first-visit returns per (state, action)
cell. Unvisited cells score zero, which the shared tie-break rule turns
into action 0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    DataError,
    LabeledDataset,
    NormalizationRanges,
    SpoilageError,
    SpoilageLevel,
)
from .env import N_ACTIONS, SpoilageEnv
from .nnet import (
    AdamConfig,
    InputLayout,
    OptimizerState,
    QNetworkParams,
    SgdConfig,
    Topology,
    TransitionBatch,
    build_qnet,
    encode_observations,
    optimizer_step,
    qnet_forward_cached,
    td_loss,
)
from .rules import ShapingConfig
from .synthgen import GenConfig, default_ranges


class InsufficientExperience(SpoilageError):
    """The replay buffer holds fewer transitions than one batch."""


class AgentKind(str, enum.Enum):
    HYBRID = "hybrid"
    LSTM_ONLY = "lstm-only"
    RNN_ONLY = "rnn-only"
    ANN = "ann"
    MONTE_CARLO = "monte-carlo"


_TOPOLOGY = {
    AgentKind.HYBRID: Topology.HYBRID,
    AgentKind.LSTM_ONLY: Topology.LSTM_ONLY,
    AgentKind.RNN_ONLY: Topology.RNN_ONLY,
    AgentKind.ANN: Topology.ANN,
}


# ---------------------------------------------------------------------------
# exploration schedule


@dataclass(frozen=True)
class EpsilonSchedule:
    """Per-episode multiplicative decay with a floor."""

    initial: float = 1.0
    decay: float = 0.9997
    floor: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise DataError(f"decay must be in (0, 1], got {self.decay}")
        if not 0.0 <= self.floor <= self.initial <= 1.0:
            raise DataError(
                f"need 0 <= floor <= initial <= 1, got floor {self.floor}, "
                f"initial {self.initial}"
            )

    def value_after(self, episodes: int) -> float:
        """Closed form of `episodes` applications of decay_epsilon."""
        if episodes < 0:
            raise DataError(f"episodes must be >= 0, got {episodes}")
        return max(self.floor, self.initial * self.decay**episodes)


def decay_epsilon(epsilon: float, schedule: EpsilonSchedule) -> float:
    """One per-episode step: max(floor, epsilon * decay)."""
    return max(schedule.floor, epsilon * schedule.decay)


def _explore_action(epsilon: float, rng) -> int | None:
    # None means the caller should act greedily; drawn this way the greedy
    # branch never spends a forward pass on a step exploration will discard
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return None


def select_action(q_values, epsilon: float, rng=None) -> SpoilageLevel:
    """Epsilon-greedy over one Q row; ties resolve to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise DataError(f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0.0:
        if rng is None:
            raise DataError("exploration requires an rng")
        choice = _explore_action(epsilon, rng)
        if choice is not None:
            return SpoilageLevel(choice)
    q = np.asarray(q_values, dtype=np.float64)
    if q.shape != (N_ACTIONS,):
        raise DataError(f"expected {N_ACTIONS} Q-values, got shape {q.shape}")
    return SpoilageLevel(int(q.argmax()))


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class Transition:
    """One step as the buffer stores it; obs fields are encoded (T, I)."""

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO store sampled uniformly with replacement.

    Rows live in preallocated rings sized on the first push, so a sample
    is a fancy-index gather that lands directly in a TransitionBatch.
    """

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise DataError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._size = 0
        self._cursor = 0
        self._obs = None

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition) -> None:
        obs = np.asarray(transition.obs, dtype=np.float64)
        if self._obs is None:
            shape = (self.capacity, *obs.shape)
            self._obs = np.empty(shape)
            self._next_obs = np.empty(shape)
            self._actions = np.empty(self.capacity, dtype=np.int64)
            self._rewards = np.empty(self.capacity)
            self._done = np.empty(self.capacity)
        k = self._cursor
        self._obs[k] = obs
        self._next_obs[k] = transition.next_obs
        self._actions[k] = int(transition.action)
        self._rewards[k] = float(transition.reward)
        self._done[k] = float(transition.done)
        self._cursor = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng) -> TransitionBatch:
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        if self._size < batch_size:
            raise InsufficientExperience(
                f"buffer holds {self._size} transitions, need {batch_size}"
            )
        idx = rng.integers(0, self._size, size=batch_size)
        return self._gather(idx)

    def contents(self) -> TransitionBatch:
        """Everything stored, oldest first (inspection, not the hot path)."""
        if self._size == 0:
            raise InsufficientExperience("buffer is empty")
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._cursor) % self.capacity
        return self._gather(order)

    def _gather(self, idx) -> TransitionBatch:
        return TransitionBatch(
            obs=self._obs[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_obs=self._next_obs[idx],
            done=self._done[idx],
        )


def replay_push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng) -> TransitionBatch:
    return buffer.sample(batch_size, rng)


# ---------------------------------------------------------------------------
# configs and results


@dataclass(frozen=True)
class TrainConfig:
    kind: AgentKind = AgentKind.HYBRID
    episodes: int = 1000
    batch_size: int = 64
    gamma: float = 0.95
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    seed: int = 0
    input_layout: InputLayout = InputLayout.SCALAR_SEQUENCE
    window: int = 5
    hidden_size: int = 64
    replay_capacity: int = 10000
    updates_per_step: int = 1
    min_buffer_fill: int | None = None  # None means one batch
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    max_steps_per_episode: int | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise DataError(f"episodes must be >= 1, got {self.episodes}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.gamma < 1.0:
            raise DataError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.updates_per_step < 0:
            raise DataError(
                f"updates_per_step must be >= 0, got {self.updates_per_step}"
            )
        if self.min_buffer_fill is not None and self.min_buffer_fill < 1:
            raise DataError(
                f"min_buffer_fill must be >= 1, got {self.min_buffer_fill}"
            )

    @property
    def effective_min_fill(self) -> int:
        return self.batch_size if self.min_buffer_fill is None else self.min_buffer_fill


@dataclass(frozen=True)
class McConfig:
    bins: int = 10
    gamma: float = 0.95
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    first_visit: bool = True
    episodes: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.bins < 2:
            raise DataError(f"bins must be >= 2, got {self.bins}")
        if not 0.0 <= self.gamma < 1.0:
            raise DataError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.episodes < 1:
            raise DataError(f"episodes must be >= 1, got {self.episodes}")


@dataclass(frozen=True)
class McPolicy:
    """Tabular Q over binned states; missing cells read as all zeros."""

    bins: int
    q: dict


@dataclass
class TrainedAgent:
    kind: AgentKind
    parameters: object  # QNetworkParams or McPolicy
    episode_rewards: list
    losses: list
    epsilons: list  # epsilon in effect during each episode, pre-decay
    final_epsilon: float
    config: object
    ranges: NormalizationRanges

    def __post_init__(self):
        if len(self.episode_rewards) != len(self.epsilons):
            raise DataError(
                "episode series disagree: "
                f"{len(self.episode_rewards)} rewards vs {len(self.epsilons)} epsilons"
            )


def _resolve_ranges(ranges: NormalizationRanges | None) -> NormalizationRanges:
    return ranges if ranges is not None else default_ranges(GenConfig())


# ---------------------------------------------------------------------------
# DQN training


def _optimizer_config(config: TrainConfig):
    if config.optimizer == "sgd":
        return SgdConfig(learning_rate=config.learning_rate)
    return AdamConfig(learning_rate=config.learning_rate)


def train_dqn(
    dataset: LabeledDataset,
    config: TrainConfig,
    ranges: NormalizationRanges | None = None,
) -> TrainedAgent:
    """Replay-buffer Q-learning over the dataset chain.

    Each episode walks the dataset once (or up to the configured step cap).
    Every step pushes its transition; once the buffer reaches the minimum
    fill, each step also applies `updates_per_step` TD updates on uniform
    batches. Epsilon decays once per episode. Deterministic for a fixed
    (seed, config, dataset).
    """
    if config.kind is AgentKind.MONTE_CARLO:
        raise DataError("train_dqn requires a network agent kind")
    rng = np.random.default_rng(config.seed)
    ranges = _resolve_ranges(ranges)
    env = SpoilageEnv(dataset, ranges, shaping=config.shaping)
    encoded = encode_observations(env.observations, config.input_layout, config.window)
    n, seq_len, width = encoded.shape

    net = build_qnet(
        _TOPOLOGY[config.kind],
        input_size=width,
        hidden_size=config.hidden_size,
        seq_len=seq_len,
        n_actions=N_ACTIONS,
        rng=rng,
    )
    # float32 compute mirror; refreshed after every master update so greedy
    # action choices always see current weights
    mirror = net.astype(np.float32)
    opt_config = _optimizer_config(config)
    opt_state = OptimizerState()
    replay = ReplayBuffer(config.replay_capacity)
    min_fill = config.effective_min_fill

    cap = n if config.max_steps_per_episode is None else min(
        n, config.max_steps_per_episode
    )
    eps = config.epsilon.initial
    episode_rewards: list = []
    losses: list = []
    epsilons: list = []
    for _ in range(config.episodes):
        env.reset()
        total = 0.0
        for t in range(cap):
            action = _explore_action(eps, rng)
            if action is None:
                q = qnet_forward_cached(mirror, encoded[t][None]).q[0]
                action = int(q.argmax())
            result = env.step(action)
            total += result.reward
            replay.push(
                Transition(
                    obs=encoded[t],
                    action=action,
                    reward=result.reward,
                    next_obs=encoded[min(t + 1, n - 1)],
                    done=result.done,
                )
            )
            if len(replay) >= min_fill:
                for _ in range(config.updates_per_step):
                    batch = replay.sample(config.batch_size, rng)
                    loss, grads = td_loss(mirror, batch, config.gamma)
                    optimizer_step(net, grads, opt_state, opt_config)
                    np.copyto(mirror.theta, net.theta, casting="same_kind")
                    losses.append(loss)
        episode_rewards.append(total)
        epsilons.append(eps)
        eps = decay_epsilon(eps, config.epsilon)

    return TrainedAgent(
        kind=config.kind,
        parameters=net,
        episode_rewards=episode_rewards,
        losses=losses,
        epsilons=epsilons,
        final_epsilon=eps,
        config=config,
        ranges=ranges,
    )


# ---------------------------------------------------------------------------
# Monte Carlo control


def _bin_keys(observations: np.ndarray, bins: int) -> list:
    # observations are clipped to [0, 1]; the top edge folds into the last bin
    cells = np.minimum((observations * bins).astype(np.int64), bins - 1)
    return [tuple(row) for row in cells]


def train_monte_carlo(
    dataset: LabeledDataset,
    config: McConfig,
    ranges: NormalizationRanges | None = None,
) -> TrainedAgent:
    """First-visit (optionally every-visit) tabular control on binned states.

    Rollouts are epsilon-greedy over the current table; after each episode
    the gamma-discounted suffix sums of the raw rewards update each visited
    cell's running mean.
    """
    rng = np.random.default_rng(config.seed)
    ranges = _resolve_ranges(ranges)
    env = SpoilageEnv(dataset, ranges)  # raw rewards by construction
    keys = _bin_keys(env.observations, config.bins)
    reward_table = env.reward_table
    n = len(keys)
    rows = np.arange(n)

    q: dict = {}
    counts: dict = {}
    eps = config.epsilon.initial
    episode_rewards: list = []
    epsilons: list = []
    for _ in range(config.episodes):
        explore = rng.random(n) < eps
        random_actions = rng.integers(N_ACTIONS, size=n)
        actions = np.empty(n, dtype=np.int64)
        for t in range(n):
            if explore[t]:
                actions[t] = random_actions[t]
            else:
                cell = q.get(keys[t])
                actions[t] = 0 if cell is None else int(cell.argmax())
        step_rewards = reward_table[rows, actions]
        g = 0.0
        returns = np.empty(n)
        for t in range(n - 1, -1, -1):
            g = step_rewards[t] + config.gamma * g
            returns[t] = g
        if config.first_visit:
            seen = set()
            visits = []
            for t in range(n):
                pair = (keys[t], actions[t])
                if pair not in seen:
                    seen.add(pair)
                    visits.append(t)
        else:
            visits = range(n)
        for t in visits:
            key = keys[t]
            a = int(actions[t])
            if key not in q:
                q[key] = np.zeros(N_ACTIONS)
                counts[key] = np.zeros(N_ACTIONS, dtype=np.int64)
            counts[key][a] += 1
            q[key][a] += (returns[t] - q[key][a]) / counts[key][a]
        episode_rewards.append(float(step_rewards.sum()))
        epsilons.append(eps)
        eps = decay_epsilon(eps, config.epsilon)

    return TrainedAgent(
        kind=AgentKind.MONTE_CARLO,
        parameters=McPolicy(bins=config.bins, q=q),
        episode_rewards=episode_rewards,
        losses=[],
        epsilons=epsilons,
        final_epsilon=eps,
        config=config,
        ranges=ranges,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    """One greedy pass: per-row predictions, true labels, raw rewards."""

    predictions: np.ndarray
    truths: np.ndarray
    rewards: np.ndarray


def _score(env: SpoilageEnv, predictions: np.ndarray) -> EvalReport:
    n = env.row_count
    rewards = env.reward_table[np.arange(n), predictions]
    return EvalReport(predictions=predictions, truths=env.labels, rewards=rewards)


def evaluate_actions(
    actions, dataset: LabeledDataset, ranges: NormalizationRanges | None = None
) -> EvalReport:
    """Score a fixed per-row action sequence (oracle or constant baselines)."""
    env = SpoilageEnv(dataset, _resolve_ranges(ranges))
    acts = np.asarray(actions, dtype=np.int64)
    if acts.shape != (env.row_count,):
        raise DataError(
            f"expected one action per row ({env.row_count}), got shape {acts.shape}"
        )
    if acts.size and (acts.min() < 0 or acts.max() >= N_ACTIONS):
        raise DataError("actions must be in 0-3")
    return _score(env, acts)


def evaluate_agent(
    agent: TrainedAgent,
    dataset: LabeledDataset,
    ranges: NormalizationRanges | None = None,
) -> EvalReport:
    """Greedy (epsilon = 0) pass over the dataset with raw rewards.

    Rewards here are always the raw +/-1 match signal regardless of any
    shaping used in training, so mean reward equals 2 * accuracy - 1.
    """
    ranges = ranges if ranges is not None else agent.ranges
    env = SpoilageEnv(dataset, ranges)
    if isinstance(agent.parameters, McPolicy):
        policy = agent.parameters
        keys = _bin_keys(env.observations, policy.bins)
        predictions = np.fromiter(
            (
                0 if policy.q.get(key) is None else int(policy.q[key].argmax())
                for key in keys
            ),
            dtype=np.int64,
            count=len(keys),
        )
    else:
        config = agent.config
        encoded = encode_observations(
            env.observations, config.input_layout, config.window
        )
        q = qnet_forward_cached(agent.parameters, encoded).q
        predictions = q.argmax(axis=1)
    return _score(env, predictions)
