"""Discretised cart-pole.

The continuous system is the classic Gym cart-pole (Euler integration, two
actions pushing the cart left or right with a fixed force). A regular grid
over the four state variables turns it into a finite MDP; transition rows are
estimated by integrating sample states drawn uniformly inside each cell. Cart
position or pole angle beyond their limits lead to a single absorbing
"fallen" state.

Training rewards are shaped quadratically at the cell centre; evaluation runs
the continuous system and counts balanced steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..interval import IntervalModelSet
from ..mdp import TabularMdp, layout_from_triples


@dataclass(frozen=True)
class CartpoleSpec:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_half_length: float = 0.5
    force: float = 10.0
    dt: float = 0.02
    pole_mass: float = 0.1
    mass_sweep: tuple[float, ...] = field(default=tuple(np.linspace(0.05, 0.2, 8).round(6)))
    bins: tuple[int, int, int, int] = (6, 6, 12, 12)
    limits: tuple[float, float, float, float] = (2.4, 3.0, 0.21, 3.5)
    samples_per_cell: int = 256
    shaping: tuple[float, float] = (0.5, 0.5)
    max_steps: int = 200
    init_spread: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mass_sweep", tuple(float(m) for m in self.mass_sweep))
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        object.__setattr__(self, "limits", tuple(float(v) for v in self.limits))
        object.__setattr__(self, "shaping", tuple(float(v) for v in self.shaping))
        if not self.mass_sweep:
            raise ValueError("mass_sweep must not be empty")
        if not min(self.mass_sweep) <= self.pole_mass <= max(self.mass_sweep):
            raise ValueError("pole_mass must lie within the mass sweep range")
        if len(self.bins) != 4 or min(self.bins) < 2:
            raise ValueError("need at least 2 bins in each of the 4 dimensions")
        if len(self.limits) != 4 or not all(0 < v < math.inf for v in self.limits):
            raise ValueError("limits must be 4 finite positive numbers")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be positive")


class DiscretizationMap:
    """Regular grid over (x, x_dot, theta, theta_dot).

    Velocities beyond their range clamp into the edge bins; position or angle
    beyond their limits map to the fallen state ``n_cells``.
    """

    def __init__(self, bins, limits):
        self.bins = tuple(int(b) for b in bins)
        self.limits = np.asarray(limits, dtype=float)
        self.edges = [np.linspace(-l, l, b + 1) for b, l in zip(self.bins, self.limits)]
        self.width = 2.0 * self.limits / np.asarray(self.bins)
        self.n_cells = int(np.prod(self.bins))
        self.fallen = self.n_cells
        self._strides = tuple(int(np.prod(self.bins[i + 1:])) for i in range(4))

    @property
    def n_states(self) -> int:
        return self.n_cells + 1

    def cells_of(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        idx = np.floor((states + self.limits) / self.width).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.bins) - 1)
        flat = np.ravel_multi_index(idx.T, self.bins)
        out_x = np.abs(states[:, 0]) > self.limits[0]
        out_t = np.abs(states[:, 2]) > self.limits[2]
        return np.where(out_x | out_t, self.fallen, flat)

    def cell_of(self, x, x_dot, theta, theta_dot) -> int:
        lim, w, b, st = self.limits, self.width, self.bins, self._strides
        if abs(x) > lim[0] or abs(theta) > lim[2]:
            return self.fallen
        cell = 0
        for i, v in enumerate((x, x_dot, theta, theta_dot)):
            k = int(math.floor((v + lim[i]) / w[i]))
            k = 0 if k < 0 else (b[i] - 1 if k >= b[i] else k)
            cell += k * st[i]
        return cell

    def multi_index(self, cell: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(cell, self.bins))

    def flat_index(self, multi) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.bins))

    def centers(self) -> np.ndarray:
        """Cell centres, shape ``(n_cells, 4)``."""
        grids = np.meshgrid(*[0.5 * (e[:-1] + e[1:]) for e in self.edges], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def sample_within(self, n_per_cell: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples inside every cell, shape ``(n_cells, n_per_cell, 4)``."""
        lows = self.centers() - 0.5 * self.width
        u = rng.random((self.n_cells, n_per_cell, 4))
        return lows[:, None, :] + u * self.width


def dynamics(spec: CartpoleSpec, states: np.ndarray, action, pole_mass: float) -> np.ndarray:
    """One Euler step of the cart-pole; ``action`` 0 pushes left, 1 pushes right."""
    x, x_dot, theta, theta_dot = np.moveaxis(states, -1, 0)
    force = np.where(np.asarray(action) == 1, spec.force, -spec.force)
    total = spec.cart_mass + pole_mass
    pml = pole_mass * spec.pole_half_length
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + pml * theta_dot**2 * sin) / total
    theta_acc = (spec.gravity * sin - cos * temp) / (
        spec.pole_half_length * (4.0 / 3.0 - pole_mass * cos**2 / total))
    x_acc = temp - pml * theta_acc * cos / total
    return np.stack([x + spec.dt * x_dot, x_dot + spec.dt * x_acc,
                     theta + spec.dt * theta_dot, theta_dot + spec.dt * theta_acc], axis=-1)


def shaped_rewards(spec: CartpoleSpec, grid: DiscretizationMap) -> np.ndarray:
    centers = grid.centers()
    w_theta, w_x = spec.shaping
    r = 1.0 - w_theta * (centers[:, 2] / spec.limits[2]) ** 2 - w_x * (centers[:, 0] / spec.limits[0]) ** 2
    rewards = np.zeros((grid.n_states, 2))
    rewards[:grid.n_cells] = r[:, None]
    return rewards


def _successor_samples(spec: CartpoleSpec, grid: DiscretizationMap, pole_mass: float) -> np.ndarray:
    # common random numbers: every mass integrates the same sample states
    rng = np.random.default_rng(spec.seed)
    samples = grid.sample_within(spec.samples_per_cell, rng)
    out = np.empty((grid.n_cells, 2, spec.samples_per_cell), dtype=np.int64)
    for a in (0, 1):
        nxt = dynamics(spec, samples, a, pole_mass)
        out[:, a] = grid.cells_of(nxt.reshape(-1, 4)).reshape(grid.n_cells, -1)
    return out


def _row_frequencies(spec: CartpoleSpec, grid: DiscretizationMap, pole_mass: float):
    """Sorted unique ``(x, u, next)`` keys and their empirical frequencies."""
    nxt = _successor_samples(spec, grid, pole_mass)
    n = grid.n_states
    x = np.arange(grid.n_cells)[:, None, None]
    u = np.arange(2)[None, :, None]
    keys = ((x * 2 + u) * n + nxt).ravel()
    keys, counts = np.unique(keys, return_counts=True)
    fallen = np.array([(grid.fallen * 2 + a) * n + grid.fallen for a in (0, 1)])
    keys = np.concatenate([keys, fallen])
    counts = np.concatenate([counts, [spec.samples_per_cell] * 2])
    return keys, counts / spec.samples_per_cell


def _initial_distribution(spec: CartpoleSpec, grid: DiscretizationMap) -> np.ndarray:
    rng = np.random.default_rng(spec.seed + 1)
    starts = rng.uniform(-spec.init_spread, spec.init_spread, size=(4096, 4))
    dist = np.bincount(grid.cells_of(starts), minlength=grid.n_states).astype(float)
    return dist / dist.sum()


def _build(spec: CartpoleSpec, masses):
    grid = DiscretizationMap(spec.bins, spec.limits)
    n = grid.n_states
    per_mass = [_row_frequencies(spec, grid, m) for m in masses]
    keys = np.unique(np.concatenate([k for k, _ in per_mass]))
    freqs = np.zeros((len(masses), len(keys)))
    for i, (k, f) in enumerate(per_mass):
        freqs[i, np.searchsorted(keys, k)] = f
    pair, nxt = np.divmod(keys, n)
    x, u = np.divmod(pair, 2)
    successors, valid, slot = layout_from_triples(n, 2, x, u, nxt)
    rows = []
    for f in (freqs.min(axis=0), freqs.max(axis=0), *freqs):
        arr = np.zeros(successors.shape)
        arr[x, u, slot] = f
        rows.append(arr)
    terminal = np.zeros(n, dtype=bool)
    terminal[grid.fallen] = True
    return grid, successors, rows, terminal


def cartpole_tensor(spec: CartpoleSpec = CartpoleSpec(), pole_mass: float | None = None,
                    discount: float = 0.97) -> TabularMdp:
    mass = spec.pole_mass if pole_mass is None else pole_mass
    grid, successors, rows, terminal = _build(spec, [mass])
    return TabularMdp(successors, rows[2], shaped_rewards(spec, grid), discount, terminal,
                      _initial_distribution(spec, grid))


def cartpole_model_set(spec: CartpoleSpec = CartpoleSpec(), discount: float = 0.97) -> IntervalModelSet:
    """Elementwise envelope of the tensors over the mass sweep (plus the true mass)."""
    masses = sorted(set(spec.mass_sweep) | {spec.pole_mass})
    grid, successors, rows, terminal = _build(spec, masses)
    rewards = shaped_rewards(spec, grid)
    return IntervalModelSet(successors, rows[0], rows[1], rewards, rewards, discount, terminal)


class CartpoleEnvironment:
    """The continuous cart-pole observed through the grid.

    ``step`` returns the shaped reward of the current cell, so rewards are a
    deterministic function of the discrete state. ``evaluate`` counts
    balanced steps of the continuous system (unshaped, +1 per step).
    """

    def __init__(self, spec: CartpoleSpec = CartpoleSpec(), max_steps: int | None = None):
        self.spec = spec
        self.grid = DiscretizationMap(spec.bins, spec.limits)
        self.max_steps = spec.max_steps if max_steps is None else max_steps
        self.rewards = shaped_rewards(spec, self.grid)
        self._reward_list = self.rewards[:, 0].tolist()
        self.terminal = np.zeros(self.grid.n_states, dtype=bool)
        self.terminal[self.grid.fallen] = True
        self._state = (0.0, 0.0, 0.0, 0.0)
        self._cell = 0

    @property
    def n_states(self) -> int:
        return self.grid.n_states

    @property
    def n_actions(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator, state: int | None = None) -> int:
        if state is not None:
            # start uniformly inside the requested cell
            lows = self.grid.centers()[state] - 0.5 * self.grid.width
            self._state = tuple((lows + rng.random(4) * self.grid.width).tolist())
        else:
            s = self.spec.init_spread
            self._state = tuple(rng.uniform(-s, s, 4).tolist())
        self._cell = self.grid.cell_of(*self._state)
        return self._cell

    def step(self, action: int, rng: np.random.Generator = None):
        sp = self.spec
        reward = self._reward_list[self._cell]
        x, x_dot, theta, theta_dot = self._state
        force = sp.force if action == 1 else -sp.force
        m = sp.pole_mass
        total = sp.cart_mass + m
        pml = m * sp.pole_half_length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + pml * theta_dot * theta_dot * sin) / total
        theta_acc = (sp.gravity * sin - cos * temp) / (sp.pole_half_length * (4.0 / 3.0 - m * cos * cos / total))
        x_acc = temp - pml * theta_acc * cos / total
        self._state = (x + sp.dt * x_dot, x_dot + sp.dt * x_acc,
                       theta + sp.dt * theta_dot, theta_dot + sp.dt * theta_acc)
        self._cell = self.grid.cell_of(*self._state)
        return self._cell, reward, self._cell == self.grid.fallen

    def evaluate(self, policy: np.ndarray, n_rollouts: int, rng: np.random.Generator):
        s = self.spec.init_spread
        states = rng.uniform(-s, s, size=(n_rollouts, 4))
        steps = np.zeros(n_rollouts)
        alive = np.ones(n_rollouts, dtype=bool)
        for _ in range(self.max_steps):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            actions = policy[self.grid.cells_of(states[idx])]
            states[idx] = dynamics(self.spec, states[idx], actions, self.spec.pole_mass)
            steps[idx] += 1
            alive[idx] = self.grid.cells_of(states[idx]) != self.grid.fallen
        return steps, steps >= self.max_steps
