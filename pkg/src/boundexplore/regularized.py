"""Data-regularised Q-bounds.

Observed transitions pull the inner optimisation of the interval Bellman
operators towards the empirical kernel through a KL penalty whose weight grows
with the square root of the visit count. Observed rewards collapse the reward
interval of their pair to a point.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .interval import IntervalModelSet, QBounds, coupled_fixed_point, sorted_rows

logger = logging.getLogger(__name__)

SUM_TOL = 1e-12
MAX_ROOT_ITERS = 200


class RegularizationFallback(UserWarning):
    """The KL-regularised row problem was infeasible and the plain interval solution was used."""


class TransitionCounts:
    """Visit counts ``T(x, u, x')`` kept sparse, with dense per-pair totals."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions
        self._counts: dict[tuple[int, int, int], int] = {}
        self.totals = np.zeros((n_states, n_actions), dtype=np.int64)

    def add(self, state: int, action: int, next_state: int, n: int = 1) -> None:
        key = (state, action, next_state)
        self._counts[key] = self._counts.get(key, 0) + n
        self.totals[state, action] += n

    def __getitem__(self, key) -> int:
        return self._counts.get(tuple(key), 0)

    def __len__(self) -> int:
        return len(self._counts)

    @property
    def n_observations(self) -> int:
        return int(self.totals.sum())

    def items(self):
        return self._counts.items()

    def copy(self) -> TransitionCounts:
        out = TransitionCounts(self.n_states, self.n_actions)
        out._counts = dict(self._counts)
        out.totals = self.totals.copy()
        return out

    @classmethod
    def from_dense(cls, counts) -> TransitionCounts:
        counts = np.asarray(counts)
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        out = cls(counts.shape[0], counts.shape[1])
        for x, u, y in zip(*np.nonzero(counts)):
            out.add(int(x), int(u), int(y), int(counts[x, u, y]))
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_states, self.n_actions, self.n_states), dtype=np.int64)
        for (x, u, y), n in self._counts.items():
            out[x, u, y] = n
        return out

    def aligned(self, successors: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Counts laid out on a model's successor slots; off-support observations are dropped."""
        out = np.zeros(successors.shape, dtype=np.int64)
        if not self._counts:
            return out
        keys = np.array(list(self._counts.keys()), dtype=np.int64)
        vals = np.fromiter(self._counts.values(), dtype=np.int64, count=len(self._counts))
        rows = successors[keys[:, 0], keys[:, 1]]
        hit = (rows == keys[:, 2:3]) & valid[keys[:, 0], keys[:, 1]]
        found = hit.any(axis=1)
        slot = np.argmax(hit, axis=1)
        out[keys[found, 0], keys[found, 1], slot[found]] = vals[found]
        return out

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "counts": [[int(x), int(u), int(y), int(n)] for (x, u, y), n in sorted(self._counts.items())],
        }

    @classmethod
    def from_json(cls, doc: dict) -> TransitionCounts:
        out = cls(int(doc["n_states"]), int(doc["n_actions"]))
        for x, u, y, n in doc.get("counts", []):
            out.add(int(x), int(u), int(y), int(n))
        return out


@dataclass(frozen=True, eq=False)
class EmpiricalKernel:
    probs: np.ndarray
    empty: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.probs > 0


def empirical_kernel(counts: TransitionCounts) -> EmpiricalKernel:
    dense = counts.dense().astype(float)
    totals = counts.totals
    probs = np.divide(dense, totals[..., None], out=np.zeros_like(dense), where=totals[..., None] > 0)
    return EmpiricalKernel(probs, totals == 0)


def kl_divergence(p, p_ref) -> float:
    """``sum p log(p / p_ref)`` with ``0 log 0 = 0``; infinite when ``p`` leaves the support of ``p_ref``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(p_ref, dtype=float)
    pos = p > 0
    if np.any(pos & (q <= 0)):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


@dataclass(frozen=True)
class LambdaSchedule:
    """``lambda = c * sqrt(T / (log(n_pairs) / delta))``, zero without data."""

    c: float
    delta: float
    n_pairs: int

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_pairs < 2:
            raise ValueError("n_pairs must be at least 2 (log(n_pairs) must be positive)")

    def __call__(self, total):
        total = np.asarray(total, dtype=float)
        if np.any(total < 0):
            raise ValueError("visit counts must be nonnegative")
        scale = math.log(self.n_pairs) / self.delta
        return self.c * np.sqrt(total / scale)


def lambda_value(schedule: LambdaSchedule, total: int) -> float:
    return float(schedule(total))


class ObservedRewards:
    """Rewards seen so far; each pair is written at most once (rewards are deterministic)."""

    def __init__(self, n_states: int, n_actions: int, atol: float = 1e-12):
        self.values = np.zeros((n_states, n_actions))
        self.mask = np.zeros((n_states, n_actions), dtype=bool)
        self.atol = atol

    def record(self, state: int, action: int, reward: float) -> None:
        if self.mask[state, action]:
            if abs(self.values[state, action] - reward) > self.atol:
                raise ValueError(f"reward at ({state}, {action}) changed from "
                                 f"{self.values[state, action]} to {reward}; rewards must be deterministic")
            return
        self.values[state, action] = reward
        self.mask[state, action] = True

    def apply(self, reward_lower: np.ndarray, reward_upper: np.ndarray):
        return (np.where(self.mask, self.values, reward_lower),
                np.where(self.mask, self.values, reward_upper))

    def copy(self) -> ObservedRewards:
        out = ObservedRewards(*self.values.shape, atol=self.atol)
        out.values = self.values.copy()
        out.mask = self.mask.copy()
        return out

    def to_json(self) -> dict:
        xs, us = np.nonzero(self.mask)
        return {"rewards": [[int(x), int(u), float(self.values[x, u])] for x, u in zip(xs, us)]}

    @classmethod
    def from_json(cls, doc: dict, n_states: int, n_actions: int) -> ObservedRewards:
        out = cls(n_states, n_actions)
        for x, u, r in doc.get("rewards", []):
            out.record(int(x), int(u), float(r))
        return out


def _solve_scale(a, lo, hi, target):
    """Find ``t`` with ``sum(clip(a * t, lo, hi)) == target`` row-wise.

    The left side is piecewise linear and nondecreasing in ``t``, so Newton
    steps land exactly once they reach the right piece; bisection keeps the
    bracket honest in the meantime. The bracket can span hundreds of orders
    of magnitude when some weights are tiny, so it is split geometrically
    until the endpoints are within a factor of 4.

    Returns ``(t, converged)``.
    """
    n = a.shape[0]
    t_lo = np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.max(np.where(a > 0, hi / a, 0.0), axis=1)
        t = target / a.sum(axis=1)
    t = np.where(np.isfinite(t), t, t_hi)
    done = np.zeros(n, dtype=bool)
    for _ in range(MAX_ROOT_ITERS):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        ai, li, hi_i, ti = a[idx], lo[idx], hi[idx], t[idx][:, None]
        raw = ai * ti
        f = np.clip(raw, li, hi_i).sum(axis=1)
        err = f - target[idx]
        ok = np.abs(err) <= SUM_TOL
        done[idx[ok]] = True
        below = err < 0
        t_lo[idx] = np.where(below, t[idx], t_lo[idx])
        t_hi[idx] = np.where(below, t_hi[idx], t[idx])
        slope = np.where((raw > li) & (raw < hi_i), ai, 0.0).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = t[idx] - err / slope
        bad = ~(slope > 0) | ~(newton > t_lo[idx]) | ~(newton < t_hi[idx])
        a_lo, a_hi = t_lo[idx], t_hi[idx]
        mid = np.where(a_lo <= 0, 0.5 * a_hi,
                       np.where(a_hi > 4.0 * a_lo, np.sqrt(a_lo) * np.sqrt(a_hi), 0.5 * (a_lo + a_hi)))
        t[idx] = np.where(bad, mid, newton)
        t[idx[ok]] = ti[ok, 0]
    return t, done


def regularized_rows(values, lower, upper, ref, lam, maximize: bool):
    """Row-wise optimiser of ``+-values @ p - lam * KL(p || ref)`` over the interval simplex.

    Arrays have shape ``(N, K)``; ``lam`` has shape ``(N,)`` and may contain
    ``np.inf`` to request the KL projection of ``ref``. Rows with ``lam == 0``
    use the sorted greedy solution. Successors outside the support of ``ref``
    stay at their lower bound.

    Returns ``(p, fallback)`` where ``fallback`` flags rows whose regularised
    problem was infeasible and which received the ``lam == 0`` solution.
    """
    values = np.asarray(values, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    ref = np.asarray(ref, dtype=float)
    lam = np.asarray(lam, dtype=float)
    p = sorted_rows(values, lower, upper, maximize)
    fallback = np.zeros(values.shape[0], dtype=bool)
    reg = np.flatnonzero(lam > 0)
    if reg.size == 0:
        return p, fallback

    v, lo, hi, r, lm = values[reg], lower[reg], upper[reg], ref[reg], lam[reg]
    free = (r > 0) & (hi > 0)
    pinned_mass = np.where(free, 0.0, lo).sum(axis=1)
    target = 1.0 - pinned_mass
    lo_f = np.where(free, lo, 0.0)
    hi_f = np.where(free, hi, 0.0)
    feasible = (lo_f.sum(axis=1) <= target + 1e-9) & (hi_f.sum(axis=1) >= target - 1e-9) & free.any(axis=1)

    sign = 1.0 if maximize else -1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(np.isinf(lm)[:, None], 0.0, sign * v / lm[:, None])
        z = np.where(free, np.log(np.where(free, r, 1.0)) + scaled, -np.inf)
        z = z - z.max(axis=1, keepdims=True, initial=-np.inf, where=free)
        # weights below ~1e-250 count as underflowed so that hi / a stays finite
        a = np.where(free & (z > -575.0), np.exp(z), 0.0)
    # mass that cannot be placed on non-underflowed entries signals lam ~ 0
    reach = np.where(a > 0, hi_f, lo_f).sum(axis=1)
    tiny = feasible & (reach < target - 1e-9)

    rows = np.flatnonzero(feasible & ~tiny)
    out = np.where(free, 0.0, lo)
    if rows.size:
        t, converged = _solve_scale(a[rows], lo_f[rows], hi_f[rows], target[rows])
        if not converged.all():
            # leave such rows to the unregularised solution rather than return a bad row
            feasible[rows[~converged]] = False
        out[rows] = np.where(free[rows], np.clip(a[rows] * t[:, None], lo_f[rows], hi_f[rows]), lo[rows])
    if tiny.any():
        # vanishing regularisation: the solution is the sorted assignment on the free slots
        tr = np.flatnonzero(tiny)
        scale_rows = np.where(free[tr], lo_f[tr], 0.0)
        share = sorted_rows(np.where(free[tr], z[tr], -np.inf if maximize else np.inf),
                            scale_rows / target[tr, None],
                            hi_f[tr] / target[tr, None], maximize=True)
        out[tr] = np.where(free[tr], share * target[tr, None], lo[tr])
    p[reg] = np.where((feasible)[:, None], out, p[reg])
    fallback[reg[~feasible]] = True
    return p, fallback


def inner_optimize_regularized(values, lower_row, upper_row, ref_row, lam: float, sense: str = "max"):
    """Single-row form of :func:`regularized_rows` (``sense`` is ``'min'`` or ``'max'``)."""
    if sense not in ("min", "max"):
        raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    row = lambda x: np.asarray(x, dtype=float)[None, :]
    p, fb = regularized_rows(row(values), row(lower_row), row(upper_row), row(ref_row),
                             np.array([lam], dtype=float), maximize=(sense == "max"))
    if fb[0]:
        warnings.warn("regularised row problem infeasible on the observed support; "
                      "using the unregularised solution", RegularizationFallback, stacklevel=2)
    return p[0]


def regularized_bound_iteration(model: IntervalModelSet, counts: TransitionCounts,
                                rewards: ObservedRewards, schedule: LambdaSchedule,
                                tol: float = 1e-8, max_iters: int = 100_000,
                                init: QBounds | None = None,
                                deterministic_rows: np.ndarray | None = None,
                                smoothing: float = 0.0) -> QBounds:
    """Fixed points of the regularised bound operators.

    ``deterministic_rows`` is an optional ``(S, A)`` mask of pairs known to
    have deterministic dynamics; once observed such a pair trusts its data
    completely (infinite regularisation weight). ``smoothing`` adds a pseudo
    count to every supported successor before forming the empirical kernel.
    """
    valid = model.upper > 0
    aligned = counts.aligned(model.successors, valid).astype(float)
    totals = counts.totals.astype(float)
    if smoothing > 0:
        aligned = np.where(valid, aligned + smoothing, 0.0)
        totals = totals + smoothing * valid.sum(axis=2)
    row_tot = aligned.sum(axis=2, keepdims=True)
    ref = np.divide(aligned, row_tot, out=np.zeros_like(aligned), where=row_tot > 0)
    lam = schedule(counts.totals)
    lam = np.where(row_tot[..., 0] > 0, lam, 0.0)
    if deterministic_rows is not None:
        det = np.asarray(deterministic_rows, dtype=bool) & (counts.totals > 0)
        lam = np.where(det, np.inf, lam)

    s, a, k = model.successors.shape
    flat = lambda x: x.reshape(s * a, k)
    lo, hi, ref_f, lam_f = flat(model.lower), flat(model.upper), flat(ref), lam.reshape(-1)
    g_lo, g_hi = rewards.apply(model.reward_lower, model.reward_upper)

    projected = np.isinf(lam_f)
    if projected.any():
        p_proj, fb = regularized_rows(np.zeros((int(projected.sum()), k)), lo[projected],
                                      hi[projected], ref_f[projected], lam_f[projected], True)
        if fb.any():
            # data incompatible with the model set: treat those pairs as unobserved
            lam_f = lam_f.copy()
            lam_f[np.flatnonzero(projected)[fb]] = 0.0
            p_proj = p_proj[~fb]
            projected = np.isinf(lam_f)
    finite = np.flatnonzero(~projected)
    reported = []

    def solver(maximize):
        def solve(vals):
            v = flat(vals)
            p = np.empty_like(v)
            pf, fb_rows = regularized_rows(v[finite], lo[finite], hi[finite], ref_f[finite],
                                           lam_f[finite], maximize)
            p[finite] = pf
            if projected.any():
                p[projected] = p_proj
            if not reported:
                reported.append(int(fb_rows.sum()))
            return p.reshape(s, a, k)
        return solve

    bounds = coupled_fixed_point(model, g_lo, g_hi, solver(False), solver(True), tol, max_iters, init)
    if reported and reported[0]:
        logger.debug("%d regularised rows fell back to the interval solution", reported[0])
    return bounds


def save_data(path, counts: TransitionCounts, rewards: ObservedRewards, **extra) -> None:
    doc = counts.to_json()
    doc.update(rewards.to_json())
    doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_data(path) -> tuple[TransitionCounts, ObservedRewards, dict]:
    doc = json.loads(Path(path).read_text())
    counts = TransitionCounts.from_json(doc)
    rewards = ObservedRewards.from_json(doc, counts.n_states, counts.n_actions)
    return counts, rewards, doc
