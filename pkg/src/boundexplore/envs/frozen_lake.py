"""Slippery Frozen Lake gridworld and its adjacency-knowledge model set.

Actions follow the Gym numbering: 0 left, 1 down, 2 right, 3 up. On slippery
ice the intended move and both perpendicular moves each happen with
probability 1/3; moves into a wall leave the agent where it is.

Rewards must be a deterministic function of ``(state, action)``, so the goal
cell is not absorbing itself: every action taken there pays 1 and moves to an
extra terminal "done" state (the last state index). Holes are terminal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..interval import IntervalModelSet
from ..mdp import MdpEnvironment, TabularMdp

MAP_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")
MAP_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)
MAPS = {"4x4": MAP_4X4, "8x8": MAP_8X8}

_MOVES = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}


@dataclass(frozen=True)
class FrozenLakeSpec:
    grid: tuple[str, ...] = field(default=MAP_4X4)
    slippery: bool = True

    def __post_init__(self):
        grid = tuple(self.grid)
        object.__setattr__(self, "grid", grid)
        if not grid or any(len(row) != len(grid[0]) for row in grid):
            raise ValueError("grid must be a non-empty rectangle")
        cells = "".join(grid)
        if set(cells) - set("SFHG"):
            raise ValueError(f"unknown cell types {sorted(set(cells) - set('SFHG'))}")
        if cells.count("S") != 1:
            raise ValueError("grid needs exactly one start cell")
        if "G" not in cells:
            raise ValueError("grid needs at least one goal cell")

    @classmethod
    def named(cls, name: str, slippery: bool = True) -> FrozenLakeSpec:
        return cls(MAPS[name], slippery)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    @property
    def cells(self) -> str:
        return "".join(self.grid)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def done_state(self) -> int:
        return self.n_cells


def _move(spec: FrozenLakeSpec, cell: int, direction: int) -> int:
    rows, cols = spec.shape
    r, c = divmod(cell, cols)
    dr, dc = _MOVES[direction]
    nr, nc = r + dr, c + dc
    if 0 <= nr < rows and 0 <= nc < cols:
        return nr * cols + nc
    return cell


def frozen_lake_mdp(spec: FrozenLakeSpec = FrozenLakeSpec(), discount: float = 0.95) -> TabularMdp:
    cells = spec.cells
    n = spec.n_cells + 1
    done = spec.done_state
    trans = np.zeros((n, 4, n))
    rewards = np.zeros((n, 4))
    terminal = [done]
    for s, kind in enumerate(cells):
        if kind == "H":
            trans[s, :, s] = 1.0
            terminal.append(s)
            continue
        if kind == "G":
            trans[s, :, done] = 1.0
            rewards[s, :] = 1.0
            continue
        for a in range(4):
            moves = [(a - 1) % 4, a, (a + 1) % 4] if spec.slippery else [a]
            for m in moves:
                trans[s, a, _move(spec, s, m)] += 1.0 / len(moves)
    trans[done, :, done] = 1.0
    initial = np.zeros(n)
    initial[cells.index("S")] = 1.0
    return TabularMdp.from_dense(trans, rewards, discount, sorted(terminal), initial)


def frozen_lake_model_set(spec: FrozenLakeSpec = FrozenLakeSpec(), discount: float = 0.95) -> IntervalModelSet:
    """Zero-probability transitions are known; every other probability lies in [0, 1]."""
    mdp = frozen_lake_mdp(spec, discount)
    upper = (mdp.transitions > 0).astype(float)
    return IntervalModelSet.from_dense(np.zeros_like(upper), upper, mdp.rewards, mdp.rewards,
                                       discount, mdp.terminal_states)


def frozen_lake_environment(spec: FrozenLakeSpec = FrozenLakeSpec(), discount: float = 0.95,
                            max_steps: int = 100) -> MdpEnvironment:
    return MdpEnvironment(frozen_lake_mdp(spec, discount), max_steps=max_steps, success_reward=1.0)


def success_probability(mdp: TabularMdp, policy: np.ndarray, horizon: int) -> float:
    """Probability that ``policy`` collects a positive reward within ``horizon`` steps."""
    dist = np.array(mdp.initial, dtype=float)
    rows = np.arange(mdp.n_states)
    succ = mdp.successors[rows, policy]
    probs = mdp.probs[rows, policy]
    paying = mdp.rewards[rows, policy] > 0
    won = 0.0
    for _ in range(horizon):
        live = np.where(mdp.terminal, 0.0, dist)
        won += float(live[paying].sum())
        live[paying] = 0.0
        nxt = np.zeros_like(dist)
        np.add.at(nxt, succ.ravel(), (live[:, None] * probs).ravel())
        dist = nxt
    return won
