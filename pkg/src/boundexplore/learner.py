"""Q-learning driven by Q-bounds.

With probability epsilon the agent samples from the bound-derived exploring
policy, otherwise it acts greedily on its Q-table. Every ``L`` episodes the
bounds are recomputed with the data collected so far and the Q-table is
clamped into them. Passing no model set gives plain epsilon-greedy Q-learning
with uniform exploration.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .exploration import ExplorationParams, compute_weights, policy_table, sample_action, weight_table
from .interval import IntervalModelSet, QBounds, bound_iteration
from .regularized import LambdaSchedule, ObservedRewards, TransitionCounts, regularized_bound_iteration


class Environment(Protocol):
    n_states: int
    n_actions: int
    terminal: np.ndarray
    max_steps: int

    def reset(self, rng: np.random.Generator, state: int | None = None) -> int: ...

    def step(self, action: int, rng: np.random.Generator) -> tuple[int, float, bool]: ...

    def evaluate(self, policy: np.ndarray, n_rollouts: int, rng: np.random.Generator): ...


@dataclass
class LearnerConfig:
    alpha: float = 0.05
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay: float | None = None
    L: float = math.inf
    max_steps_per_episode: int = 100
    exploring_starts: bool = False
    alpha_schedule: str = "constant"
    rm_a: float = 1.0
    rm_b: float = 1.0
    bound_tol: float = 1e-8
    regularized_tol: float = 1e-6
    bound_max_iters: int = 100_000

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not (self.L >= 1):
            raise ValueError("L must be >= 1 (use math.inf to never recompute)")
        if self.alpha_schedule not in ("constant", "robbins_monro"):
            raise ValueError("alpha_schedule must be 'constant' or 'robbins_monro'")
        if self.max_steps_per_episode < 1:
            raise ValueError("max_steps_per_episode must be positive")

    def decay(self, n_episodes: int) -> float:
        """Per-episode multiplicative factor; by default epsilon_end is hit at 90% of training."""
        if self.epsilon_decay is not None:
            return self.epsilon_decay
        if self.epsilon_end <= 0 or self.epsilon_start <= 0 or n_episodes <= 1:
            return 0.0 if self.epsilon_end < self.epsilon_start else 1.0
        return (self.epsilon_end / self.epsilon_start) ** (1.0 / (0.9 * n_episodes))

    def epsilon(self, episode: int, n_episodes: int) -> float:
        return max(self.epsilon_end, self.epsilon_start * self.decay(n_episodes) ** episode)


@dataclass
class EpisodeStats:
    episode: int
    steps: int
    ret: float
    discounted: float
    terminal: bool
    truncated: bool
    epsilon: float


class LearnerState:
    def __init__(self, n_states: int, n_actions: int, rng: np.random.Generator,
                 bounds: QBounds | None = None):
        self.counts = TransitionCounts(n_states, n_actions)
        self.observed_rewards = ObservedRewards(n_states, n_actions)
        self.visits = np.zeros((n_states, n_actions), dtype=np.int64)
        self.episode = 0
        self.rng = rng
        self.bounds = bounds
        if bounds is None:
            self.q = np.zeros((n_states, n_actions))
        else:
            self.q = 0.5 * (bounds.lower + bounds.upper)
        self._explore_cum = None
        self.params: ExplorationParams | None = None

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def set_bounds(self, bounds: QBounds, params: ExplorationParams) -> None:
        self.bounds = bounds
        self.params = params
        weights, _ = weight_table(bounds, params)
        cum = np.cumsum(policy_table(weights), axis=1)
        cum[:, -1] = np.inf
        self._explore_cum = cum

    def saturate(self) -> None:
        lo, hi = self.bounds.lower, self.bounds.upper
        np.clip(self.q, lo, np.maximum(lo, hi), out=self.q)

    def to_json(self) -> dict:
        doc = {
            "q": self.q.tolist(),
            "bounds": None if self.bounds is None else self.bounds.to_json(),
            "counts": self.counts.to_json(),
            "observed_rewards": self.observed_rewards.to_json(),
            "visits": self.visits.tolist(),
            "episode": self.episode,
            "rng": self.rng.bit_generator.state,
            "params": None if self.params is None else asdict(self.params),
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> LearnerState:
        q = np.asarray(doc["q"], dtype=float)
        bitgen = getattr(np.random, doc["rng"]["bit_generator"])()
        bitgen.state = doc["rng"]
        state = cls(q.shape[0], q.shape[1], np.random.Generator(bitgen))
        state.q = q
        state.counts = TransitionCounts.from_json(doc["counts"])
        state.observed_rewards = ObservedRewards.from_json(doc["observed_rewards"], *q.shape)
        state.visits = np.asarray(doc["visits"], dtype=np.int64)
        state.episode = int(doc["episode"])
        if doc.get("bounds") is not None:
            params = ExplorationParams(**doc["params"]) if doc.get("params") else ExplorationParams()
            state.set_bounds(QBounds.from_json(doc["bounds"]), params)
        return state


def save_checkpoint(state: LearnerState, path) -> None:
    Path(path).write_text(json.dumps(state.to_json()))


def load_checkpoint(path) -> LearnerState:
    return LearnerState.from_json(json.loads(Path(path).read_text()))


def q_update(state: LearnerState, x: int, u: int, r: float, x_next: int, alpha: float,
             gamma: float, terminal: bool) -> float:
    q = state.q
    target = r if terminal else r + gamma * q[x_next].max()
    q[x, u] = (1.0 - alpha) * q[x, u] + alpha * target
    return q[x, u]


def select_action(state: LearnerState, x: int, epsilon: float, params: ExplorationParams | None,
                  rng: np.random.Generator) -> int:
    """Explore with probability ``epsilon`` (bound-guided if bounds exist, else uniform); otherwise act greedily.

    ``params=None`` reuses the table cached by :meth:`LearnerState.set_bounds`.
    """
    if epsilon > 0 and rng.random() < epsilon:
        if state.bounds is None:
            return int(rng.integers(state.n_actions))
        if params is None or params == state.params:
            return int(np.searchsorted(state._explore_cum[x], rng.random(), side="right"))
        return sample_action(compute_weights(state.bounds, x, params), rng)
    return int(np.argmax(state.q[x]))


def run_episode(state: LearnerState, env: Environment, config: LearnerConfig,
                params: ExplorationParams | None = None, epsilon: float | None = None) -> EpisodeStats:
    """One episode of learning; ``epsilon`` defaults to ``config.epsilon_start``."""
    if epsilon is None:
        epsilon = config.epsilon_start
    rng = state.rng
    if config.exploring_starts:
        candidates = np.flatnonzero(~np.asarray(env.terminal))
        x = env.reset(rng, state=int(rng.choice(candidates)))
    else:
        x = env.reset(rng)
    gamma = config.gamma
    counts, rewards, visits = state.counts, state.observed_rewards, state.visits
    constant_alpha = config.alpha_schedule == "constant"
    total, discounted, scale, steps, done = 0.0, 0.0, 1.0, 0, False
    while steps < config.max_steps_per_episode:
        u = select_action(state, x, epsilon, params, rng)
        x_next, r, done = env.step(u, rng)
        counts.add(x, u, x_next)
        rewards.record(x, u, r)
        visits[x, u] += 1
        if constant_alpha:
            alpha = config.alpha
        else:
            alpha = min(1.0, config.rm_a / (config.rm_b + visits[x, u]))
        q_update(state, x, u, r, x_next, alpha, gamma, done)
        total += r
        discounted += scale * r
        scale *= gamma
        steps += 1
        x = x_next
        if done:
            break
    state.episode += 1
    return EpisodeStats(state.episode, steps, total, discounted, done, not done, epsilon)


Callback = Callable[[int, LearnerState], None]


def train(env: Environment, model: IntervalModelSet | None, config: LearnerConfig,
          params: ExplorationParams, schedule: LambdaSchedule | None, n_episodes: int,
          rng: np.random.Generator, callback: Callback | None = None,
          initial_bounds: QBounds | None = None,
          deterministic_rows: np.ndarray | None = None):
    """Run the learning loop for ``n_episodes``.

    ``callback(episode, state)`` fires once before training (episode 0) and
    after every episode, after any bound recomputation. Returns
    ``(state, history)`` with one :class:`EpisodeStats` per episode.
    """
    if model is not None:
        if (model.n_states, model.n_actions) != (env.n_states, env.n_actions):
            raise ValueError("model set and environment dimensions differ")
        bounds = initial_bounds
        if bounds is None:
            bounds = bound_iteration(model, tol=config.bound_tol, max_iters=config.bound_max_iters)
        state = LearnerState(env.n_states, env.n_actions, rng, bounds)
        state.set_bounds(bounds, params)
        if math.isfinite(config.L) and schedule is None:
            raise ValueError("a finite L needs a lambda schedule")
    else:
        state = LearnerState(env.n_states, env.n_actions, rng)

    history = []
    if callback is not None:
        callback(0, state)
    for e in range(1, n_episodes + 1):
        eps = config.epsilon(e - 1, n_episodes)
        history.append(run_episode(state, env, config, None, eps))
        if model is not None and math.isfinite(config.L) and e % int(config.L) == 0:
            bounds = regularized_bound_iteration(
                model, state.counts, state.observed_rewards, schedule,
                tol=config.regularized_tol, max_iters=config.bound_max_iters,
                init=state.bounds, deterministic_rows=deterministic_rows)
            state.set_bounds(bounds, params)
            state.saturate()
        if callback is not None:
            callback(e, state)
    return state, history
