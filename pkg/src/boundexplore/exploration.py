"""Exploration weights derived from Q-bounds.

Each action at a state falls in exactly one of four cases:

1. certifiably optimal -> weight ``xi``
2. uncertain and able to beat the best worst-case value -> weight ``beta(x, u)``
3. tight bounds and dominated -> weight 0
4. anything else (uncertain but currently dominated) -> weight ``zeta``

``beta`` is the probability or expected amount of improvement under a uniform
belief on the Q-value interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interval import QBounds, max_of_others, value_bounds

TIGHT_ATOL = 1e-9

CASE_OPTIMAL = 1
CASE_IMPROVING = 2
CASE_PRUNED = 3
CASE_OTHER = 4

BETA_KINDS = ("pi", "ei", "constant")


@dataclass(frozen=True)
class ExplorationParams:
    xi: float = 1.0
    zeta: float = 0.0
    beta: str = "ei"
    beta_value: float = 1.0

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.beta not in BETA_KINDS:
            raise ValueError(f"beta must be one of {BETA_KINDS}, got {self.beta!r}")
        if self.beta == "constant" and self.beta_value <= 0:
            raise ValueError("constant beta must be positive")


@dataclass(frozen=True)
class StateWeights:
    weights: np.ndarray
    cases: np.ndarray


def improvement(qb: QBounds, state: int, action: int) -> float:
    v_lower = qb.lower[state].max()
    return max(0.0, float(qb.upper[state, action] - v_lower))


def _beta(kind, lower, upper, v_lower, constant=1.0):
    width = upper - lower
    gain = np.maximum(0.0, upper - v_lower)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "pi":
            return np.minimum(1.0, gain / width)
        if kind == "ei":
            return gain * gain / (2.0 * width)
    return np.full(np.shape(width), float(constant))


def beta_weight(qb: QBounds, state: int, action: int, kind: str = "ei", constant: float = 1.0) -> float:
    lower, upper = qb.lower[state, action], qb.upper[state, action]
    if upper - lower <= TIGHT_ATOL:
        raise ValueError(f"beta requested for a tight interval at ({state}, {action})")
    return float(_beta(kind, lower, upper, qb.lower[state].max(), constant))


def weight_table(qb: QBounds, params: ExplorationParams) -> tuple[np.ndarray, np.ndarray]:
    """Weights and case tags for every ``(state, action)`` pair."""
    lower, upper = qb.lower, qb.upper
    v_lower, _ = value_bounds(qb)
    vl = v_lower[:, None]

    case1 = lower >= max_of_others(upper)
    first = np.argmax(case1, axis=1)
    only_first = np.zeros_like(case1)
    has = np.flatnonzero(case1.any(axis=1))
    only_first[has, first[has]] = True

    tight = np.abs(upper - lower) <= TIGHT_ATOL
    case2 = ~tight & (upper > vl)
    case3 = tight & (upper <= vl)

    cases = np.full(lower.shape, CASE_OTHER, dtype=np.int8)
    cases[case3] = CASE_PRUNED
    cases[case2] = CASE_IMPROVING
    cases[only_first] = CASE_OPTIMAL

    weights = np.full(lower.shape, params.zeta, dtype=float)
    weights[cases == CASE_PRUNED] = 0.0
    weights[cases == CASE_OPTIMAL] = params.xi
    imp = cases == CASE_IMPROVING
    if imp.any():
        beta = _beta(params.beta, lower, upper, vl, params.beta_value)
        weights[imp] = beta[imp]
    return weights, cases


def compute_weights(qb: QBounds, state: int, params: ExplorationParams) -> StateWeights:
    sub = QBounds(qb.lower[state:state + 1], qb.upper[state:state + 1])
    weights, cases = weight_table(sub, params)
    return StateWeights(weights[0], cases[0])


def policy_table(weights: np.ndarray) -> np.ndarray:
    """Normalise weights row-wise; rows with no positive weight become uniform."""
    weights = np.asarray(weights, dtype=float)
    total = weights.sum(axis=-1, keepdims=True)
    uniform = np.full(weights.shape, 1.0 / weights.shape[-1])
    return np.divide(weights, total, out=uniform, where=total > 0)


def sample_action(weights, rng: np.random.Generator) -> int:
    if isinstance(weights, StateWeights):
        weights = weights.weights
    probs = policy_table(np.asarray(weights, dtype=float))
    cum = np.cumsum(probs)
    k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(k, len(probs) - 1)
