"""Bounded-parameter model sets and pessimistic/optimistic Q-function bounds.

A model set fixes elementwise intervals on every transition probability and
reward. Iterating the interval Bellman operators to their fixed points gives
Q-bounds that sandwich the optimal Q-function of every member MDP, and the
bounds in turn certify some actions as optimal or suboptimal.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .mdp import (
    ROW_SUM_ATOL,
    ConvergenceError,
    TabularMdp,
    _frozen,
    compress_rows,
    gather_rows,
    scatter_rows,
    successor_values,
)


@dataclass(frozen=True, eq=False)
class IntervalModelSet:
    """Elementwise bounds on transitions and rewards (row-sparse layout).

    ``lower``/``upper`` are aligned with ``successors`` exactly as
    :class:`~boundexplore.mdp.TabularMdp` stores ``probs``; slots outside a
    row's support carry ``lower = upper = 0``.
    """

    successors: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    reward_lower: np.ndarray
    reward_upper: np.ndarray
    discount: float
    terminal: np.ndarray

    def __post_init__(self):
        succ = np.asarray(self.successors, dtype=np.int64)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        glo = np.asarray(self.reward_lower, dtype=float)
        ghi = np.asarray(self.reward_upper, dtype=float)
        n_states = glo.shape[0]
        terminal = np.zeros(n_states, dtype=bool)
        term_in = np.asarray(self.terminal)
        if term_in.dtype == bool:
            terminal[:] = term_in
        else:
            terminal[term_in.astype(int)] = True
        if not (succ.shape == lo.shape == hi.shape and succ.shape[:2] == glo.shape == ghi.shape):
            raise ValueError("model set arrays have inconsistent shapes")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if np.any(lo < 0) or np.any(hi > 1 + ROW_SUM_ATOL) or np.any(lo > hi + ROW_SUM_ATOL):
            raise ValueError("transition bounds must satisfy 0 <= lower <= upper <= 1")
        lo_sum, hi_sum = lo.sum(axis=2), hi.sum(axis=2)
        empty = (lo_sum > 1 + ROW_SUM_ATOL) | (hi_sum < 1 - ROW_SUM_ATOL)
        empty[terminal] = False
        if empty.any():
            x, u = np.argwhere(empty)[0]
            raise ValueError(f"empty transition polytope at state {x}, action {u}: "
                             f"sum(lower)={lo_sum[x, u]:.6g}, sum(upper)={hi_sum[x, u]:.6g}")
        if np.any(glo > ghi) or not (np.all(np.isfinite(glo)) and np.all(np.isfinite(ghi))):
            raise ValueError("reward bounds must be finite with lower <= upper")
        object.__setattr__(self, "successors", _frozen(succ))
        object.__setattr__(self, "lower", _frozen(np.minimum(lo, hi)))
        object.__setattr__(self, "upper", _frozen(hi))
        object.__setattr__(self, "reward_lower", _frozen(glo))
        object.__setattr__(self, "reward_upper", _frozen(ghi))
        object.__setattr__(self, "terminal", _frozen(terminal))
        object.__setattr__(self, "discount", float(self.discount))

    @classmethod
    def from_dense(cls, lower_transitions, upper_transitions, lower_rewards, upper_rewards,
                   discount, terminal_states=()):
        lt = np.asarray(lower_transitions, dtype=float)
        ut = np.asarray(upper_transitions, dtype=float)
        successors, valid = compress_rows((ut > 0) | (lt > 0))
        n_states = ut.shape[0]
        terminal = np.zeros(n_states, dtype=bool)
        terminal[list(terminal_states)] = True
        return cls(successors, gather_rows(lt, successors, valid), gather_rows(ut, successors, valid),
                   lower_rewards, upper_rewards, discount, terminal)

    @classmethod
    def singleton(cls, mdp: TabularMdp) -> IntervalModelSet:
        return cls(mdp.successors, mdp.probs, mdp.probs, mdp.rewards, mdp.rewards,
                   mdp.discount, mdp.terminal)

    @property
    def n_states(self) -> int:
        return self.reward_lower.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward_lower.shape[1]

    @property
    def lower_transitions(self) -> np.ndarray:
        return scatter_rows(self.lower, self.successors, self.n_states)

    @property
    def upper_transitions(self) -> np.ndarray:
        return scatter_rows(self.upper, self.successors, self.n_states)

    def align(self, dense: np.ndarray) -> np.ndarray:
        """Gather a dense ``(S, A, S)`` tensor onto this model's successor layout."""
        valid = self.upper > 0
        return gather_rows(np.asarray(dense, dtype=float), self.successors, valid)

    def contains(self, mdp: TabularMdp, atol: float = 1e-9) -> bool:
        t = mdp.transitions
        lo, hi = self.lower_transitions, self.upper_transitions
        live = ~self.terminal
        return bool(
            np.all(t[live] >= lo[live] - atol) and np.all(t[live] <= hi[live] + atol)
            and np.all(mdp.rewards >= self.reward_lower - atol)
            and np.all(mdp.rewards <= self.reward_upper + atol)
        )

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "lower_transitions": self.lower_transitions.tolist(),
            "upper_transitions": self.upper_transitions.tolist(),
            "lower_rewards": self.reward_lower.tolist(),
            "upper_rewards": self.reward_upper.tolist(),
            "terminal_states": np.flatnonzero(self.terminal).tolist(),
        }

    def to_sparse_json(self) -> dict:
        """Compact form for large models: rows are stored on the successor layout."""
        return {
            "format": "sparse",
            "discount": self.discount,
            "successors": self.successors.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "lower_rewards": self.reward_lower.tolist(),
            "upper_rewards": self.reward_upper.tolist(),
            "terminal_states": np.flatnonzero(self.terminal).tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> IntervalModelSet:
        terminal = np.asarray(doc.get("terminal_states", []), dtype=int)
        if doc.get("format") == "sparse":
            return cls(doc["successors"], doc["lower"], doc["upper"], doc["lower_rewards"],
                       doc["upper_rewards"], doc["discount"], terminal)
        return cls.from_dense(doc["lower_transitions"], doc["upper_transitions"],
                              doc["lower_rewards"], doc["upper_rewards"], doc["discount"],
                              terminal.tolist())

    def save(self, path, sparse: bool = False) -> None:
        doc = self.to_sparse_json() if sparse else self.to_json()
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> IntervalModelSet:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class QBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float)
        upper = np.array(self.upper, dtype=float)
        if lower.shape != upper.shape:
            raise ValueError("lower and upper Q tables differ in shape")
        object.__setattr__(self, "lower", _frozen(lower))
        object.__setattr__(self, "upper", _frozen(upper))

    @property
    def gap(self) -> float:
        return float(np.max(self.upper - self.lower))

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> QBounds:
        return cls(doc["lower"], doc["upper"])


def value_bounds(q: QBounds) -> tuple[np.ndarray, np.ndarray]:
    return q.lower.max(axis=1), q.upper.max(axis=1)


def sorted_rows(values: np.ndarray, lower: np.ndarray, upper: np.ndarray, maximize: bool) -> np.ndarray:
    """Vectorised sorted greedy mass assignment over the last axis.

    Every entry starts at its lower bound; the leftover mass is poured onto
    entries in order of decreasing (``maximize``) or increasing value, each
    filled up to its upper bound.
    """
    key = -values if maximize else values
    order = np.argsort(key, axis=-1, kind="stable")
    lo = np.take_along_axis(lower, order, axis=-1)
    room = np.take_along_axis(upper, order, axis=-1) - lo
    leftover = 1.0 - lower.sum(axis=-1, keepdims=True)
    before = np.cumsum(room, axis=-1) - room
    filled = lo + np.clip(leftover - before, 0.0, room)
    out = np.empty_like(filled)
    np.put_along_axis(out, order, filled, axis=-1)
    return out


def inner_optimize_sorted(values, lower_row, upper_row, sense: str = "max") -> np.ndarray:
    """Exact optimiser of ``values @ p`` over ``{lower <= p <= upper, sum(p) = 1}``."""
    if sense not in ("min", "max"):
        raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")
    values = np.asarray(values, dtype=float)
    lo = np.asarray(lower_row, dtype=float)
    hi = np.asarray(upper_row, dtype=float)
    if np.any(lo > hi) or lo.sum() > 1 + ROW_SUM_ATOL or hi.sum() < 1 - ROW_SUM_ATOL:
        raise ValueError("infeasible transition polytope")
    return sorted_rows(values, lo, hi, maximize=(sense == "max"))


def default_init(reward_lower: np.ndarray, reward_upper: np.ndarray, discount: float) -> QBounds:
    # envelopes include 0 because terminal successors are worth exactly 0
    lo = min(0.0, float(reward_lower.min())) / (1.0 - discount)
    hi = max(0.0, float(reward_upper.max())) / (1.0 - discount)
    return QBounds(np.full(reward_lower.shape, lo), np.full(reward_upper.shape, hi))


RowSolver = Callable[[np.ndarray], np.ndarray]


def coupled_fixed_point(model: IntervalModelSet, reward_lower: np.ndarray, reward_upper: np.ndarray,
                        solve_lower: RowSolver, solve_upper: RowSolver, tol: float,
                        max_iters: int, init: QBounds | None) -> QBounds:
    """Synchronous sweeps of the pessimistic/optimistic backups until both settle.

    ``solve_lower``/``solve_upper`` map successor values of shape ``(S, A, K)``
    to the chosen transition rows of the same shape.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if init is None:
        init = default_init(reward_lower, reward_upper, model.discount)
    qlo, qhi = np.array(init.lower), np.array(init.upper)
    gamma, succ, term = model.discount, model.successors, model.terminal
    residual = np.inf
    for _ in range(max_iters):
        vlo = successor_values(qlo, term)[succ]
        vhi = successor_values(qhi, term)[succ]
        new_lo = reward_lower + gamma * np.sum(solve_lower(vlo) * vlo, axis=2)
        new_hi = reward_upper + gamma * np.sum(solve_upper(vhi) * vhi, axis=2)
        new_lo[term] = reward_lower[term]
        new_hi[term] = reward_upper[term]
        residual = max(float(np.max(np.abs(new_lo - qlo))), float(np.max(np.abs(new_hi - qhi))))
        qlo, qhi = new_lo, new_hi
        if residual <= tol:
            return QBounds(qlo, qhi)
    raise ConvergenceError("bound iteration did not converge", residual)


def bound_iteration(model: IntervalModelSet, tol: float = 1e-8, max_iters: int = 100_000,
                    init: QBounds | None = None) -> QBounds:
    """Fixed points of the unregularised interval Bellman operators.

    Started from the default envelope the iterates approach the fixed points
    monotonically from outside, so the returned bounds are conservative.
    """
    lo, hi = model.lower, model.upper
    return coupled_fixed_point(
        model, model.reward_lower, model.reward_upper,
        lambda v: sorted_rows(v, lo, hi, maximize=False),
        lambda v: sorted_rows(v, lo, hi, maximize=True),
        tol, max_iters, init,
    )


class Certificate(enum.IntEnum):
    UNCERTAIN = 0
    OPTIMAL = 1
    SUBOPTIMAL = 2


def max_of_others(table: np.ndarray) -> np.ndarray:
    """``out[x, u] = max_{v != u} table[x, v]``; ``-inf`` when there is a single action."""
    n_actions = table.shape[1]
    if n_actions == 1:
        return np.full(table.shape, -np.inf)
    top2 = np.sort(table, axis=1)[:, -2:]
    best = np.argmax(table, axis=1)
    out = np.repeat(top2[:, 1:2], n_actions, axis=1)
    out[np.arange(table.shape[0]), best] = top2[:, 0]
    return out


def certify_actions(q: QBounds) -> np.ndarray:
    """Per-pair :class:`Certificate` codes derived from converged bounds.

    At most one action per state is certified optimal; on ties the lowest
    index wins and the rest stay uncertain unless separately dominated.
    """
    v_lower, _ = value_bounds(q)
    optimal = q.lower >= max_of_others(q.upper)
    first = np.argmax(optimal, axis=1)
    keep = np.zeros_like(optimal)
    rows = np.flatnonzero(optimal.any(axis=1))
    keep[rows, first[rows]] = True
    suboptimal = q.upper < v_lower[:, None]
    out = np.full(q.lower.shape, Certificate.UNCERTAIN, dtype=np.int8)
    out[suboptimal] = Certificate.SUBOPTIMAL
    out[keep] = Certificate.OPTIMAL
    return out


def _fit_to_box(direction: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Row-wise ``clip(s * direction, lo, hi)`` with the scalar ``s`` making each row sum to 1."""
    a = np.zeros(direction.shape[:-1] + (1,))
    b = np.ones_like(a)
    for _ in range(64):
        short = np.clip(b * direction, lo, hi).sum(axis=-1, keepdims=True) < 1.0
        if not short.any():
            break
        b = np.where(short, 2.0 * b, b)
    for _ in range(100):
        mid = 0.5 * (a + b)
        short = np.clip(mid * direction, lo, hi).sum(axis=-1, keepdims=True) < 1.0
        a = np.where(short, mid, a)
        b = np.where(short, b, mid)
    return np.clip(b * direction, lo, hi)


def sample_member(model: IntervalModelSet, rng: np.random.Generator,
                  vertex_weight: float | None = None) -> TabularMdp:
    """Draw an MDP from the model set.

    Each row mixes a random vertex of its polytope (sorted greedy under random
    values) with a Dirichlet draw scaled and clipped into the box; rewards
    are uniform within their intervals.
    """
    s, a, k = model.successors.shape
    lo, hi = model.lower, model.upper
    live = hi > 0
    vertex = sorted_rows(rng.random((s, a, k)), lo, hi, maximize=True)
    d = np.where(live, rng.standard_gamma(1.0, (s, a, k)), 0.0)
    d /= np.maximum(d.sum(axis=-1, keepdims=True), 1e-300)
    interior = _fit_to_box(d, lo, hi)
    w = rng.random((s, a, 1)) if vertex_weight is None else np.full((s, a, 1), vertex_weight)
    probs = w * vertex + (1 - w) * interior
    probs /= probs.sum(axis=-1, keepdims=True)
    rewards = model.reward_lower + rng.random((s, a)) * (model.reward_upper - model.reward_lower)
    succ = np.array(model.successors)
    for x in np.flatnonzero(model.terminal):
        # terminal rows must be a pure self-loop in a TabularMdp
        succ[x] = x
        probs[x] = 0.0
        probs[x, :, 0] = 1.0
    initial = np.zeros(s)
    initial[0] = 1.0
    return TabularMdp(succ, probs, rewards, model.discount, model.terminal, initial)
