"""Finite discounted MDPs, the exact Bellman solver and simulation stepping.

Transition tensors are stored row-sparse: for every ``(state, action)`` pair the
``successors`` array lists up to ``K`` next states and ``probs`` holds the
matching probabilities. Unused slots point back at the source state with
probability zero. A dense ``(S, A, S)`` view is available through
:attr:`TabularMdp.transitions` for small problems.

Terminal states are absorbing self-loops. Their Q-value is their immediate
reward and they contribute zero onward value when reached as a successor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

ROW_SUM_ATOL = 1e-9


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration exhausts its iteration budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def layout_from_triples(n_states: int, n_actions: int, x, u, nxt):
    """Padded successor layout for support triples sorted by ``(x, u)``.

    Returns ``(successors, valid, slot)`` where ``successors``/``valid`` have
    shape ``(S, A, K)`` and ``slot[i]`` is where triple ``i`` landed. Padding
    slots hold the source state index and are marked invalid.
    """
    x, u, nxt = (np.asarray(v, dtype=np.int64) for v in (x, u, nxt))
    flat = x * n_actions + u
    if np.any(np.diff(flat) < 0):
        raise ValueError("triples must be sorted by (state, action)")
    slot = np.arange(len(flat)) - np.searchsorted(flat, flat)
    width = max(int(slot.max(initial=-1)) + 1, 1)
    successors = np.broadcast_to(np.arange(n_states)[:, None, None],
                                 (n_states, n_actions, width)).copy()
    valid = np.zeros((n_states, n_actions, width), dtype=bool)
    successors[x, u, slot] = nxt
    valid[x, u, slot] = True
    return successors, valid, slot


def compress_rows(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded successor layout for a boolean ``(S, A, S)`` support mask."""
    n_states, n_actions, _ = mask.shape
    successors, valid, _ = layout_from_triples(n_states, n_actions, *np.nonzero(mask))
    return successors, valid


def gather_rows(dense: np.ndarray, successors: np.ndarray, valid: np.ndarray) -> np.ndarray:
    n_states, n_actions, _ = successors.shape
    x = np.arange(n_states)[:, None, None]
    u = np.arange(n_actions)[None, :, None]
    return np.where(valid, dense[x, u, successors], 0.0)


def scatter_rows(values: np.ndarray, successors: np.ndarray, n_states: int) -> np.ndarray:
    s, a, _ = successors.shape
    out = np.zeros((s, a, n_states))
    x = np.broadcast_to(np.arange(s)[:, None, None], successors.shape)
    u = np.broadcast_to(np.arange(a)[None, :, None], successors.shape)
    np.add.at(out, (x, u, successors), values)
    return out


@dataclass(frozen=True, eq=False)
class TabularMdp:
    successors: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    discount: float
    terminal: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        succ = np.asarray(self.successors, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        n_states, n_actions = rewards.shape
        terminal = np.zeros(n_states, dtype=bool)
        term_in = np.asarray(self.terminal)
        if term_in.dtype == bool:
            terminal[:] = term_in
        else:
            terminal[term_in.astype(int)] = True
        initial = np.asarray(self.initial, dtype=float)
        if succ.shape != probs.shape or succ.shape[:2] != (n_states, n_actions):
            raise ValueError("successors/probs/rewards shapes disagree")
        if succ.min(initial=0) < 0 or succ.max(initial=0) >= n_states:
            raise ValueError("successor index out of range")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if np.any(probs < 0) or np.any(probs > 1 + ROW_SUM_ATOL):
            raise ValueError("transition probabilities must lie in [0, 1]")
        sums = probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_ATOL):
            bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_ATOL)[0]
            raise ValueError(f"transition row {tuple(bad)} sums to {sums[tuple(bad)]}")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        for x in np.flatnonzero(terminal):
            stay = np.where(succ[x] == x, probs[x], 0.0).sum(axis=1)
            if np.any(np.abs(stay - 1.0) > ROW_SUM_ATOL):
                raise ValueError(f"terminal state {x} must self-loop with probability 1")
        if initial.shape != (n_states,) or abs(initial.sum() - 1.0) > ROW_SUM_ATOL:
            raise ValueError("initial distribution must be a probability vector over states")
        object.__setattr__(self, "successors", _frozen(succ))
        object.__setattr__(self, "probs", _frozen(probs))
        object.__setattr__(self, "rewards", _frozen(rewards))
        object.__setattr__(self, "terminal", _frozen(terminal))
        object.__setattr__(self, "initial", _frozen(initial))
        object.__setattr__(self, "discount", float(self.discount))

    @classmethod
    def from_dense(cls, transitions, rewards, discount, terminal_states=(), initial=None):
        transitions = np.asarray(transitions, dtype=float)
        if transitions.ndim != 3 or transitions.shape[0] != transitions.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        n_states = transitions.shape[0]
        successors, valid = compress_rows(transitions > 0)
        probs = gather_rows(transitions, successors, valid)
        if initial is None:
            initial = np.zeros(n_states)
            initial[0] = 1.0
        terminal = np.zeros(n_states, dtype=bool)
        terminal[list(terminal_states)] = True
        return cls(successors, probs, rewards, discount, terminal, initial)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    @property
    def terminal_states(self) -> list[int]:
        return np.flatnonzero(self.terminal).tolist()

    @property
    def transitions(self) -> np.ndarray:
        """Dense ``(S, A, S)`` transition tensor."""
        return scatter_rows(self.probs, self.successors, self.n_states)

    @cached_property
    def _cumulative(self) -> np.ndarray:
        cum = np.cumsum(self.probs, axis=2)
        # everything from the last positive entry on is a catch-all, so round-off
        # in the row sum can never land a sample on a padding slot
        width = self.probs.shape[2]
        last = width - 1 - np.argmax(self.probs[..., ::-1] > 0, axis=2)
        cum[np.arange(width) >= last[..., None]] = np.inf
        return cum

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "terminal_states": self.terminal_states,
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> TabularMdp:
        trans = doc["transitions"]
        if isinstance(trans, dict):
            mdp = cls(trans["successors"], trans["probs"], doc["rewards"], doc["discount"],
                      np.asarray(doc.get("terminal_states", []), dtype=int),
                      doc.get("initial", _point_mass(len(doc["rewards"]))))
        else:
            mdp = cls.from_dense(trans, doc["rewards"], doc["discount"],
                                 doc.get("terminal_states", []), doc.get("initial"))
        for key, size in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
            if key in doc and int(doc[key]) != size:
                raise ValueError(f"{key}={doc[key]} does not match the tensor shape ({size})")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> TabularMdp:
        return cls.from_json(json.loads(Path(path).read_text()))


def _point_mass(n: int) -> np.ndarray:
    p = np.zeros(n)
    p[0] = 1.0
    return p


def successor_values(q: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """State values ``max_u q(x, u)`` with terminal states pinned at zero."""
    v = q.max(axis=1)
    return np.where(terminal, 0.0, v)


def bellman_apply(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    v = successor_values(q, mdp.terminal)
    tq = mdp.rewards + mdp.discount * np.sum(mdp.probs * v[mdp.successors], axis=2)
    tq[mdp.terminal] = mdp.rewards[mdp.terminal]
    return tq


def greedy_policy(q: np.ndarray, atol: float = 0.0) -> np.ndarray:
    """Greedy action per state; among actions within ``atol`` of the best, the lowest index wins."""
    q = np.asarray(q)
    if atol == 0.0:
        return np.argmax(q, axis=1)
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - atol, axis=1)


def _evaluate_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    n = mdp.n_states
    rows = np.arange(n)
    succ = mdp.successors[rows, policy]
    probs = np.where(mdp.terminal[succ], 0.0, mdp.probs[rows, policy])
    probs[mdp.terminal] = 0.0
    r = np.where(mdp.terminal, 0.0, mdp.rewards[rows, policy])
    g = mdp.discount
    if n <= 400:
        a = np.eye(n)
        np.add.at(a, (np.repeat(rows, succ.shape[1]), succ.ravel()), -g * probs.ravel())
        return np.linalg.solve(a, r)
    p = scipy.sparse.csr_matrix((probs.ravel(), (np.repeat(rows, succ.shape[1]), succ.ravel())),
                                shape=(n, n))
    a = scipy.sparse.identity(n, format="csr") - g * p
    return scipy.sparse.linalg.spsolve(a.tocsc(), r)


def solve_exact(mdp: TabularMdp, tol: float = 1e-8, max_iters: int = 100_000):
    """Optimal Q-function and greedy policy of ``mdp``.

    Howard policy iteration gets close to the fixed point in a handful of
    linear solves; value-iteration sweeps then certify a sup-norm Bellman
    residual of at most ``tol``.

    Returns ``(q, policy)``. Raises :class:`ConvergenceError` if the residual
    target is not met within ``max_iters`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy = np.zeros(mdp.n_states, dtype=np.int64)
    q = None
    for _ in range(200):
        v = _evaluate_policy(mdp, policy)
        v = np.where(mdp.terminal, 0.0, v)
        q = mdp.rewards + mdp.discount * np.sum(mdp.probs * v[mdp.successors], axis=2)
        q[mdp.terminal] = mdp.rewards[mdp.terminal]
        current = q[np.arange(mdp.n_states), policy]
        # only switch on strict improvement so the iteration cannot cycle on ties
        better = q.max(axis=1) > current + 1e-12 * (1.0 + np.abs(current))
        if not better.any():
            break
        policy = np.where(better, np.argmax(q, axis=1), policy)

    residual = np.inf
    for _ in range(max_iters + 1):
        tq = bellman_apply(mdp, q)
        residual = float(np.max(np.abs(tq - q)))
        q = tq
        if residual <= tol:
            return q, greedy_policy(q, atol=1e-10)
    raise ConvergenceError("value iteration did not converge", residual)


def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator):
    """Sample one transition. Returns ``(next_state, reward, is_terminal)``."""
    reward = float(mdp.rewards[state, action])
    if mdp.terminal[state]:
        return state, reward, True
    k = int(np.searchsorted(mdp._cumulative[state, action], rng.random(), side="right"))
    nxt = int(mdp.successors[state, action, k])
    return nxt, reward, bool(mdp.terminal[nxt])


class MdpEnvironment:
    """Episodic simulator over a :class:`TabularMdp`.

    ``success_reward`` marks an episode as successful once the accumulated
    undiscounted reward reaches it; ``None`` disables the success flag.
    """

    def __init__(self, mdp: TabularMdp, max_steps: int = 100, success_reward: float | None = None):
        self.mdp = mdp
        self.max_steps = max_steps
        self.success_reward = success_reward
        self._cum = mdp._cumulative
        self._initial_cum = np.cumsum(mdp.initial)
        self._initial_cum[-1] = np.inf

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def terminal(self) -> np.ndarray:
        return self.mdp.terminal

    def reset(self, rng: np.random.Generator, state: int | None = None) -> int:
        if state is not None:
            self._state = int(state)
        else:
            self._state = int(np.searchsorted(self._initial_cum, rng.random(), side="right"))
        return self._state

    def step(self, action: int, rng: np.random.Generator):
        nxt, reward, done = step(self.mdp, self._state, action, rng)
        self._state = nxt
        return nxt, reward, done

    def evaluate(self, policy: np.ndarray, n_rollouts: int, rng: np.random.Generator):
        """Roll out a deterministic policy ``n_rollouts`` times in lockstep.

        Returns ``(returns, successes)`` arrays of undiscounted episode return
        and success flags.
        """
        mdp = self.mdp
        states = np.searchsorted(self._initial_cum, rng.random(n_rollouts), side="right")
        returns = np.zeros(n_rollouts)
        alive = ~mdp.terminal[states]
        for _ in range(self.max_steps):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            s = states[idx]
            a = policy[s]
            returns[idx] += mdp.rewards[s, a]
            cum = self._cum[s, a]
            k = (cum <= rng.random(len(idx))[:, None]).sum(axis=1)
            nxt = mdp.successors[s, a, k]
            states[idx] = nxt
            alive[idx] = ~mdp.terminal[nxt]
        if self.success_reward is None:
            successes = np.zeros(n_rollouts, dtype=bool)
        else:
            successes = returns >= self.success_reward - 1e-12
        return returns, successes
