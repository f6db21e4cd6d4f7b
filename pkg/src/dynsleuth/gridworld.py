"""LiDAR Grid World: floor plans, constraints, observations, transitions and
an exact value-iteration solver.

Cells are addressed by row-major index ``r * width + c`` with row 0 at the
top. Boundary walls are implicit; ``GridMap.cells`` holds only the interior.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache

import numpy as np


class GridAction(IntEnum):
    MOVE_LEFT = 0
    MOVE_RIGHT = 1
    MOVE_UP = 2
    MOVE_DOWN = 3
    STAY = 4


N_ACTIONS = len(GridAction)

# (drow, dcol) per action, in GridAction order
ACTION_DELTAS = np.array([(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)], dtype=np.int64)

# N, NE, E, SE, S, SW, W, NW
LIDAR_DIRECTIONS = np.array(
    [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)],
    dtype=np.int64,
)


class MapParseError(ValueError):
    pass


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    cells: np.ndarray
    goal: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("map dimensions must be positive")
        cells = np.asarray(self.cells, dtype=np.uint8).reshape(-1).copy()
        if cells.size != self.width * self.height:
            raise ValueError(
                f"cells has {cells.size} entries, expected {self.width * self.height}"
            )
        if np.any(cells > 1):
            raise ValueError("cells must be 0/1")
        if not 0 <= self.goal < cells.size:
            raise ValueError(f"goal index {self.goal} out of range")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.goal == other.goal
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.goal, self.cells.tobytes()))

    def __repr__(self):
        return f"GridMap({self.height}x{self.width}, goal={self.goal})\n{render_map(self)}"

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def grid(self) -> np.ndarray:
        return self.cells.reshape(self.height, self.width)

    @property
    def free_cells(self) -> np.ndarray:
        """Grid indices of free cells, ascending; row order of a QTable."""
        return np.flatnonzero(self.cells == 0)

    def free_index(self, cell: int) -> int:
        idx = int(np.searchsorted(self.free_cells, cell))
        if idx >= len(self.free_cells) or self.free_cells[idx] != cell:
            raise ValueError(f"cell {cell} is not free")
        return idx

    def coords(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.width)

    def is_free(self, cell: int) -> bool:
        return 0 <= cell < self.size and self.cells[cell] == 0


@dataclass(frozen=True)
class MdpSpec:
    gamma: float = 0.95
    step_limit: int = 100
    reward_goal: float = 1.0
    reward_penalty: float = -0.1
    reward_default: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")
        if not self.reward_goal > self.reward_default > self.reward_penalty:
            raise ValueError("need reward_goal > reward_default > reward_penalty")


@dataclass(frozen=True)
class ConstraintReport:
    connected: bool
    unique_goal_free: bool
    no_2x2_block: bool

    @property
    def passed(self) -> bool:
        return self.connected and self.unique_goal_free and self.no_2x2_block


@dataclass(frozen=True)
class QTable:
    values: np.ndarray  # (n_free, N_ACTIONS)
    free_cells: np.ndarray = field(repr=False)
    sweeps: int = 0

    def row(self, cell: int) -> np.ndarray:
        idx = int(np.searchsorted(self.free_cells, cell))
        return self.values[idx]


# ---------------------------------------------------------------------------
# text format


def parse_map(text: str) -> GridMap:
    lines = text.strip("\n").split("\n")
    if not lines or not lines[0]:
        raise MapParseError("empty map")
    width = len(lines[0])
    cells = []
    goal = None
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MapParseError(
                f"line {r + 1}: expected {width} columns, found {len(line)}"
            )
        for c, ch in enumerate(line):
            if ch == ".":
                cells.append(0)
            elif ch == "#":
                cells.append(1)
            elif ch == "G":
                if goal is not None:
                    raise MapParseError(f"line {r + 1}, column {c + 1}: second goal 'G'")
                goal = r * width + c
                cells.append(0)
            else:
                raise MapParseError(f"line {r + 1}, column {c + 1}: illegal character {ch!r}")
    if goal is None:
        raise MapParseError("map has no goal 'G'")
    return GridMap(width=width, height=len(lines), cells=np.array(cells), goal=goal)


def render_map(m: GridMap) -> str:
    chars = np.where(m.cells == 1, "#", ".")
    chars[m.goal] = "G"
    rows = ["".join(chars[r * m.width:(r + 1) * m.width]) for r in range(m.height)]
    return "\n".join(rows)


def load_map(path) -> GridMap:
    with open(path, encoding="ascii") as fh:
        return parse_map(fh.read())


def save_map(m: GridMap, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(render_map(m) + "\n")


# ---------------------------------------------------------------------------
# constraints


def _has_2x2_block(grid: np.ndarray) -> bool:
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        return False
    g = grid.astype(bool)
    return bool(np.any(g[:-1, :-1] & g[1:, :-1] & g[:-1, 1:] & g[1:, 1:]))


def _reachable(m: GridMap, start: int) -> np.ndarray:
    seen = np.zeros(m.size, dtype=bool)
    seen[start] = True
    queue = deque([start])
    succ = transition_table(m)
    while queue:
        cell = queue.popleft()
        for nxt in succ[cell, :4]:
            if not seen[nxt]:
                seen[nxt] = True
                queue.append(nxt)
    return seen


def validate_constraints(m: GridMap) -> ConstraintReport:
    goal_free = bool(m.cells[m.goal] == 0)
    free = m.cells == 0
    if goal_free:
        connected = bool(np.array_equal(_reachable(m, m.goal), free))
    else:
        connected = False
    return ConstraintReport(
        connected=connected,
        unique_goal_free=goal_free,
        no_2x2_block=not _has_2x2_block(m.grid),
    )


def is_valid(m: GridMap) -> bool:
    return validate_constraints(m).passed


def random_map(
    width: int,
    height: int,
    goal: int,
    density: float = 0.3,
    rng: np.random.Generator | None = None,
    max_tries: int = 10_000,
) -> GridMap:
    if not 0 <= goal < width * height:
        raise ValueError(f"goal {goal} outside a {height}x{width} map")
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    if max_tries < 1:
        raise ValueError("max_tries must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    for _ in range(max_tries):
        cells = (rng.random(width * height) < density).astype(np.uint8)
        cells[goal] = 0
        m = GridMap(width, height, cells, goal)
        if is_valid(m):
            return m
    raise GenerationFailed(
        f"no valid {height}x{width} map after {max_tries} tries at density {density}"
    )


# ---------------------------------------------------------------------------
# observations and dynamics


@lru_cache(maxsize=64)
def _ray_table(height: int, width: int) -> np.ndarray:
    """Index into a padded flat grid for every (step, direction, cell).

    Padding is wide enough that every ray hits the border by step ``reach``.
    """
    reach = max(height, width) + 1
    pw = width + 2 * reach
    r, c = np.divmod(np.arange(height * width), width)
    steps = np.arange(1, reach + 1)[:, None, None]
    dr = LIDAR_DIRECTIONS[None, :, 0, None]
    dc = LIDAR_DIRECTIONS[None, :, 1, None]
    rr = r[None, None, :] + reach + steps * dr
    cc = c[None, None, :] + reach + steps * dc
    table = rr * pw + cc
    table.setflags(write=False)
    return table


def _padded_flat(m: GridMap) -> np.ndarray:
    reach = max(m.height, m.width) + 1
    return np.pad(m.grid, reach, constant_values=1).reshape(-1)


def lidar_all(m: GridMap) -> np.ndarray:
    """LiDAR readings for every cell, shape (size, 8); obstacle rows are junk."""
    blocked = _padded_flat(m)[_ray_table(m.height, m.width)]
    # first blocking step along the ray; the padding guarantees one exists
    return (np.argmax(blocked, axis=0) + 1).T.astype(np.float64)


def lidar(m: GridMap, cell: int) -> np.ndarray:
    if not m.is_free(cell):
        raise ValueError(f"cell {cell} is an obstacle or out of range")
    return lidar_all(m)[cell]


def free_observations(m: GridMap) -> np.ndarray:
    """LiDAR readings of the free cells, in QTable row order."""
    return lidar_all(m)[m.free_cells]


def transition_table(m: GridMap) -> np.ndarray:
    """Next cell for every (cell, action); blocked moves stay in place."""
    r, c = np.divmod(np.arange(m.size), m.width)
    nr = r[:, None] + ACTION_DELTAS[None, :, 0]
    nc = c[:, None] + ACTION_DELTAS[None, :, 1]
    inside = (nr >= 0) & (nr < m.height) & (nc >= 0) & (nc < m.width)
    target = np.where(inside, nr * m.width + nc, 0)
    open_ = inside & (m.cells[target] == 0)
    return np.where(open_, target, np.arange(m.size)[:, None])


def reward_table(m: GridMap, spec: MdpSpec, succ: np.ndarray | None = None) -> np.ndarray:
    succ = transition_table(m) if succ is None else succ
    rewards = np.full(succ.shape, spec.reward_default, dtype=np.float64)
    rewards[succ == np.arange(m.size)[:, None]] = spec.reward_penalty
    rewards[succ == m.goal] = spec.reward_goal
    return rewards


def step(m: GridMap, spec: MdpSpec, cell: int, action: int) -> tuple[int, float, bool]:
    if not m.is_free(cell):
        raise ValueError(f"cell {cell} is an obstacle or out of range")
    action = GridAction(action)
    r, c = m.coords(cell)
    dr, dc = ACTION_DELTAS[action]
    nr, nc = r + dr, c + dc
    nxt = nr * m.width + nc
    if action == GridAction.STAY or not (0 <= nr < m.height and 0 <= nc < m.width) or m.cells[nxt]:
        return cell, spec.reward_penalty, False
    if nxt == m.goal:
        return nxt, spec.reward_goal, True
    return nxt, spec.reward_default, False


def value_iteration(m: GridMap, spec: MdpSpec | None = None, vi_tolerance: float = 1e-8) -> QTable:
    spec = MdpSpec() if spec is None else spec
    free = m.free_cells
    pos = np.full(m.size, -1)
    pos[free] = np.arange(len(free))
    succ = transition_table(m)[free]
    rewards = reward_table(m, spec)[free]
    nxt = pos[succ]
    # arriving at the goal terminates, so nothing is bootstrapped from it
    cont = np.where(succ == m.goal, 0.0, spec.gamma)
    goal_row = pos[m.goal]

    q = np.zeros((len(free), N_ACTIONS))
    sweeps = 0
    while True:
        v = q.max(axis=1)
        v[goal_row] = 0.0
        new_q = rewards + cont * v[nxt]
        new_q[goal_row] = 0.0
        sweeps += 1
        delta = np.max(np.abs(new_q - q))
        q = new_q
        if delta < vi_tolerance:
            break
    return QTable(values=q, free_cells=free, sweeps=sweeps)


def bellman_residual(m: GridMap, spec: MdpSpec, q: QTable) -> np.ndarray:
    free = m.free_cells
    pos = np.full(m.size, -1)
    pos[free] = np.arange(len(free))
    succ = transition_table(m)[free]
    v = q.values.max(axis=1)
    v[pos[m.goal]] = 0.0
    target = reward_table(m, spec)[free] + np.where(succ == m.goal, 0.0, spec.gamma) * v[pos[succ]]
    target[pos[m.goal]] = 0.0
    return np.abs(target - q.values)


def boltzmann_policy(q: QTable | np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)
    z = values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_rollout_success(m: GridMap, actions: np.ndarray, limit: int) -> np.ndarray:
    """Whether a fixed per-cell action map reaches the goal from each free cell.

    ``actions`` is indexed by grid cell; returns a boolean per free cell.
    """
    succ = transition_table(m)
    cur = m.free_cells.copy()
    reached = cur == m.goal
    for _ in range(limit):
        cur = np.where(reached, cur, succ[cur, actions[cur]])
        reached |= cur == m.goal
        if reached.all():
            break
    return reached
