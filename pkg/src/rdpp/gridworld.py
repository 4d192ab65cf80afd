"""Grid-world deceptive MDP: maps, deterministic 4-connected dynamics, rewards,
shortest-path value tables and trajectories.

Cells are ``(x, y)`` tuples with ``y = 0`` the top row.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Sequence

import numpy as np

from .errors import (
    BlockedOrigin,
    NoStart,
    ParseError,
    TooFewGoals,
    Unreachable,
    UnreachableGoal,
)

Cell = tuple

ACTIONS = ("up", "down", "left", "right")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
N_ACTIONS = 4


@dataclass(frozen=True)
class RewardSpec:
    step_cost: float = -1.0
    goal_reward: float = 100.0
    horizon: int | None = None

    def __post_init__(self):
        if not self.step_cost < 0:
            raise ValueError("step_cost must be negative")
        if not self.goal_reward > 0:
            raise ValueError("goal_reward must be positive")


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    blocked: frozenset
    goals: tuple
    start: Cell
    true_goal_index: int = 0
    name: str = ""
    rewards: RewardSpec = field(default_factory=RewardSpec)

    @property
    def true_goal(self) -> Cell:
        return self.goals[self.true_goal_index]

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    @property
    def horizon(self) -> int:
        if self.rewards.horizon is not None:
            return int(self.rewards.horizon)
        return 4 * (self.width + self.height)

    def with_true_goal(self, index: int) -> "GridMap":
        if not 0 <= index < len(self.goals):
            raise IndexError(f"true goal index {index} out of range for {len(self.goals)} goals")
        return replace(self, true_goal_index=index)

    def in_bounds(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and tuple(cell) not in self.blocked

    @cached_property
    def free_mask(self) -> np.ndarray:
        mask = np.ones((self.height, self.width), dtype=bool)
        for x, y in self.blocked:
            mask[y, x] = False
        return mask

    @cached_property
    def free_cells(self) -> list:
        return [(x, y) for y in range(self.height) for x in range(self.width) if self.free_mask[y, x]]

    @cached_property
    def goal_distances(self) -> np.ndarray:
        """``(n_goals, height, width)`` BFS distances; -1 where unreachable."""
        return np.stack([distance_field(self, g) for g in self.goals])

    def distance(self, a, b) -> int:
        if tuple(b) in self.goals:
            d = int(self.goal_distances[self.goals.index(tuple(b))][a[1], a[0]])
        else:
            d = int(distance_field(self, b)[a[1], a[0]])
        if d < 0:
            raise Unreachable(f"{tuple(b)} not reachable from {tuple(a)}")
        return d

    def next_cell(self, cell, action: int) -> Cell:
        dx, dy = MOVES[action]
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self.is_free(nxt) else tuple(cell)

    def to_text(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                c = (x, y)
                if c == self.start:
                    row.append("S")
                elif c in self.goals:
                    row.append(str(self.goals.index(c)))
                elif c in self.blocked:
                    row.append("#")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"


def distance_field(grid: GridMap, source) -> np.ndarray:
    """BFS step counts from ``source`` to every cell (moves are reversible)."""
    dist = np.full((grid.height, grid.width), -1, dtype=np.int64)
    sx, sy = source
    if not grid.is_free(source):
        return dist
    dist[sy, sx] = 0
    queue = deque([(sx, sy)])
    free = grid.free_mask
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            if 0 <= nx < grid.width and 0 <= ny < grid.height and free[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


def load_map(text: str, true_goal_index: int = 0, name: str = "",
             rewards: RewardSpec | None = None) -> GridMap:
    """Parse the ASCII map format: ``#`` blocked, ``.`` free, ``S`` start, digits goals."""
    lines = [ln.rstrip("\r") for ln in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty map")
    width = len(lines[0])
    blocked, goals, start = set(), {}, None
    for y, line in enumerate(lines):
        if len(line) != width:
            raise ParseError(f"row {y + 1} has length {len(line)}, expected {width}")
        for x, ch in enumerate(line):
            if ch == "#":
                blocked.add((x, y))
            elif ch == ".":
                pass
            elif ch == "S":
                if start is not None:
                    raise ParseError(f"second start at row {y + 1}, column {x + 1}")
                start = (x, y)
            elif ch.isdigit():
                i = int(ch)
                if i in goals:
                    raise ParseError(f"goal {i} appears twice")
                goals[i] = (x, y)
            else:
                raise ParseError(f"bad glyph {ch!r} at row {y + 1}, column {x + 1}")
    if start is None:
        raise NoStart("map has no start cell 'S'")
    if len(goals) < 2:
        raise TooFewGoals(f"need at least 2 candidate goals, found {len(goals)}")
    if sorted(goals) != list(range(len(goals))):
        raise ParseError(f"goal digits must be 0..{len(goals) - 1}, found {sorted(goals)}")
    grid = GridMap(
        width=width,
        height=len(lines),
        blocked=frozenset(blocked),
        goals=tuple(goals[i] for i in range(len(goals))),
        start=start,
        name=name,
        rewards=rewards or RewardSpec(),
    )
    reach = distance_field(grid, start)
    for i, (gx, gy) in enumerate(grid.goals):
        if reach[gy, gx] < 0:
            raise UnreachableGoal(f"goal {i} at {(gx, gy)} is not reachable from the start")
    longest = max(int(reach[gy, gx]) for gx, gy in grid.goals)
    if grid.horizon < longest:
        raise ValueError(f"horizon {grid.horizon} shorter than the longest goal distance {longest}")
    return grid.with_true_goal(true_goal_index)


BUNDLED = ("grid15", "grid49", "grid100", "pirate49")


def bundled_map(name: str, true_goal_index: int = 0) -> GridMap:
    """Load one of the maps shipped with the package (see ``rdpp/maps``)."""
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled map {name!r}; choose from {BUNDLED}")
    text = resources.files("rdpp").joinpath("maps").joinpath(f"{name}.txt").read_text()
    return load_map(text, true_goal_index, name=name)


def load_map_file(path, true_goal_index: int = 0) -> GridMap:
    path = str(path)
    if path in BUNDLED:
        return bundled_map(path, true_goal_index)
    with open(path, encoding="utf-8") as fh:
        return load_map(fh.read(), true_goal_index, name=path)


def step(grid: GridMap, cell, action: int):
    """One deterministic transition: ``(next_cell, reward, done)``."""
    cell = tuple(cell)
    if not grid.is_free(cell):
        raise BlockedOrigin(f"cannot step from blocked cell {cell}")
    if action not in range(N_ACTIONS):
        raise ValueError(f"action must be in 0..3, got {action}")
    nxt = grid.next_cell(cell, action)
    reward = grid.rewards.step_cost
    done = nxt == grid.true_goal
    if done:
        reward += grid.rewards.goal_reward
    return nxt, reward, done


def optimal_q_tables(grid: GridMap) -> np.ndarray:
    """``Q[i, y, x, a]`` for every candidate goal (undiscounted shortest path).

    ``V_i(s) = goal_reward + dist_i(s) * step_cost`` and
    ``Q_i(s, a) = step_cost + V_i(next(s, a))``; blocked cells, and cells
    from which goal ``i`` cannot be reached, hold NaN.
    """
    r = grid.rewards
    dist = grid.goal_distances.astype(np.float64)
    dist[dist < 0] = np.nan
    values = r.goal_reward + dist * r.step_cost
    q = np.full((grid.n_goals, grid.height, grid.width, N_ACTIONS), np.nan)
    for x, y in grid.free_cells:
        for a in range(N_ACTIONS):
            nx, ny = grid.next_cell((x, y), a)
            q[:, y, x, a] = r.step_cost + values[:, ny, nx]
    return q


def action_regret(q_tables: np.ndarray) -> np.ndarray:
    """``Q(s, a) - max_a' Q(s, a')`` per goal; NaN on blocked cells."""
    q = np.asarray(q_tables, dtype=np.float64)
    best = np.max(np.where(np.isnan(q), -np.inf, q), axis=-1, keepdims=True)
    return np.where(np.isfinite(best), q - best, np.nan)


def shortest_path(grid: GridMap, source, target) -> list:
    """Minimal-length cell path; ties go to the first of up, down, left, right."""
    source, target = tuple(source), tuple(target)
    if not grid.is_free(source) or not grid.is_free(target):
        raise Unreachable(f"{source} -> {target}: endpoint is blocked")
    if target in grid.goals:
        dist = grid.goal_distances[grid.goals.index(target)]
    else:
        dist = distance_field(grid, target)
    if dist[source[1], source[0]] < 0:
        raise Unreachable(f"{target} not reachable from {source}")
    path = [source]
    cell = source
    while cell != target:
        here = dist[cell[1], cell[0]]
        for a in range(N_ACTIONS):
            nxt = grid.next_cell(cell, a)
            if dist[nxt[1], nxt[0]] == here - 1:
                cell = nxt
                break
        path.append(cell)
    return path


@dataclass
class Trajectory:
    """Ordered ``(cell, action)`` steps followed by the terminal cell."""

    steps: list
    terminal_cell: Cell
    episode_index: int = 0
    reached_goal: bool = False

    def __len__(self):
        return len(self.steps)

    @property
    def cells(self) -> list:
        return [c for c, _ in self.steps] + [self.terminal_cell]

    @property
    def actions(self) -> list:
        return [a for _, a in self.steps]

    def prefix(self, n: int) -> "Trajectory":
        n = max(0, min(int(n), len(self.steps)))
        end = self.steps[n][0] if n < len(self.steps) else self.terminal_cell
        return Trajectory(list(self.steps[:n]), end, self.episode_index,
                          self.reached_goal and n == len(self.steps))

    def validate(self, grid: GridMap, horizon: int | None = None) -> None:
        cells = self.cells
        for (c, a), nxt in zip(self.steps, cells[1:]):
            if not grid.is_free(c):
                raise ValueError(f"trajectory visits blocked cell {c}")
            if grid.next_cell(c, a) != tuple(nxt):
                raise ValueError(f"illegal transition {c} --{ACTIONS[a]}--> {nxt}")
        if horizon is not None and len(self.steps) > horizon:
            raise ValueError(f"trajectory longer than horizon {horizon}")


def trajectory_from_cells(cells: Sequence, episode_index: int = 0,
                          goal=None) -> Trajectory:
    """Recover actions from a path of adjacent cells."""
    cells = [tuple(c) for c in cells]
    steps = []
    for c, nxt in zip(cells[:-1], cells[1:]):
        delta = (nxt[0] - c[0], nxt[1] - c[1])
        if delta not in MOVES:
            raise ValueError(f"cells {c} and {nxt} are not adjacent")
        steps.append((c, MOVES.index(delta)))
    reached = goal is not None and cells[-1] == tuple(goal)
    return Trajectory(steps, cells[-1], episode_index, reached)


def optimal_length(grid: GridMap) -> int:
    return int(grid.goal_distances[grid.true_goal_index][grid.start[1], grid.start[0]])
