"""Environment families used as attack targets and shadow-training grounds.

Every environment exposes a batched core (``reset_batch``, ``observe``,
``step_batch``) that trainers and rollouts drive in lockstep, plus the usual
single-episode ``reset(seed)`` / ``step(action)`` wrapper on top of it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .gridworld import (
    GridAction,
    GridMap,
    MdpSpec,
    N_ACTIONS,
    is_valid,
    lidar_all,
    parse_map,
    render_map,
    transition_table,
)

# PointBot constants; shared by every candidate so reward scales are comparable
POINTBOT_DT = 0.05
POINTBOT_HORIZON = 200
POINTBOT_TARGET_X = 10.0
POINTBOT_SUCCESS_BONUS = 1.0
POINTBOT_CONTROL_COST = 0.001
POINTBOT_BASELINE = {"mass": 1.0, "friction": 0.5, "power": 1.0}

# fixed floor plan shared by the slipgrid6 candidates
SLIPGRID_BASE_MAP = """\
......G
.#.#...
.#.####
.#.....
.###.#.
.....#.
.#.....
"""

# a move slips to one of these, uniformly
_PERPENDICULAR = np.array([[2, 3], [2, 3], [0, 1], [0, 1], [4, 4]])


class EnvEpisodeMixin:
    """Single-episode interface over the batched core."""

    _state: Any = None
    _rng: np.random.Generator | None = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._state = self.reset_batch(self._rng, 1)
        self._t = 0
        return self.observe(self._state)[0]

    def step(self, action):
        if self._state is None:
            raise RuntimeError("call reset() first")
        self._state, reward, done = self.step_batch(self._state, np.asarray([action]), self._rng)
        self._t += 1
        done = bool(done[0]) or self._t >= self.horizon
        return self.observe(self._state)[0], float(reward[0]), done


# ---------------------------------------------------------------------------
# Grid World (deterministic) and the slippery variant


class GridEnv(EnvEpisodeMixin):
    discrete = True
    n_actions = N_ACTIONS
    obs_dim = 8
    input_contract = "lidar8"

    def __init__(self, grid_map: GridMap, spec: MdpSpec | None = None):
        if not is_valid(grid_map):
            raise ValueError("map violates floor-plan constraints")
        self.map = grid_map
        self.spec = MdpSpec() if spec is None else spec
        self.horizon = self.spec.step_limit
        self.succ = transition_table(grid_map)
        self.obs_table = lidar_all(grid_map)
        self.start_cells = np.array([c for c in grid_map.free_cells if c != grid_map.goal])

    def reset_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.start_cells[rng.integers(len(self.start_cells), size=n)]

    def observe(self, cells: np.ndarray) -> np.ndarray:
        return self.obs_table[cells]

    def _move(self, cells, actions, rng):
        return self.succ[cells, actions]

    def step_batch(self, cells, actions, rng):
        actions = np.asarray(actions, dtype=np.int64)
        nxt = self._move(cells, actions, rng)
        spec = self.spec
        reward = np.where(nxt == cells, spec.reward_penalty, spec.reward_default)
        done = nxt == self.map.goal
        reward = np.where(done, spec.reward_goal, reward)
        return nxt, reward, done


@dataclass(frozen=True)
class SlipGridParams:
    base_map: GridMap
    slip_prob: float = 0.0
    move_penalty: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError("slip_prob must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "base_map": render_map(self.base_map).split("\n"),
            "slip_prob": self.slip_prob,
            "move_penalty": self.move_penalty,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SlipGridParams":
        return cls(parse_map("\n".join(d["base_map"])), float(d["slip_prob"]), float(d["move_penalty"]))


class SlipGridEnv(GridEnv):
    def __init__(self, params: SlipGridParams, spec: MdpSpec | None = None):
        super().__init__(params.base_map, spec)
        self.params = params

    def _move(self, cells, actions, rng):
        slip = rng.random(actions.shape) < self.params.slip_prob
        side = rng.integers(2, size=actions.shape)
        actual = np.where(slip, _PERPENDICULAR[actions, side], actions)
        return self.succ[cells, actual]

    def step_batch(self, cells, actions, rng):
        nxt, reward, done = super().step_batch(cells, actions, rng)
        return nxt, np.where(done, reward, reward + self.params.move_penalty), done


def slipgrid_step(params: SlipGridParams, cell: int, action: int, rng: np.random.Generator,
                  spec: MdpSpec | None = None) -> tuple[int, float, bool]:
    env = SlipGridEnv(params, spec)
    if not params.base_map.is_free(cell):
        raise ValueError(f"cell {cell} is an obstacle or out of range")
    nxt, reward, done = env.step_batch(np.array([cell]), np.array([int(GridAction(action))]), rng)
    return int(nxt[0]), float(reward[0]), bool(done[0])


# ---------------------------------------------------------------------------
# PointBot: 1-d point mass pushed along a track


@dataclass(frozen=True)
class PointBotParams:
    mass: float = 1.0
    friction: float = 0.5
    power: float = 1.0

    def __post_init__(self):
        if not (self.mass > 0 and self.friction >= 0 and self.power > 0):
            raise ValueError("PointBot needs mass > 0, friction >= 0, power > 0")
        if not all(np.isfinite([self.mass, self.friction, self.power])):
            raise ValueError("PointBot parameters must be finite")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PointBotParams":
        return cls(float(d["mass"]), float(d["friction"]), float(d["power"]))


def pointbot_step(params: PointBotParams, state, action: float):
    """One Euler step. ``state`` is (x, v); returns ((x', v'), reward, reached)."""
    x, v = state
    if not (np.isfinite(x) and np.isfinite(v) and np.isfinite(action)):
        raise ValueError("non-finite PointBot state or action")
    a = float(np.clip(action, -1.0, 1.0))
    acc = (params.power * a - params.friction * v) / params.mass
    v2 = v + POINTBOT_DT * acc
    x2 = x + POINTBOT_DT * v2
    reward = (x2 - x) - POINTBOT_CONTROL_COST * a * a
    reached = x2 >= POINTBOT_TARGET_X
    if reached:
        reward += POINTBOT_SUCCESS_BONUS
    return (x2, v2), reward, reached


class PointBotEnv(EnvEpisodeMixin):
    discrete = False
    n_actions = 1
    obs_dim = 3
    input_contract = "pointbot3"
    horizon = POINTBOT_HORIZON

    def __init__(self, params: PointBotParams):
        self.params = params

    def reset_batch(self, rng, n):
        return np.zeros((n, 2))

    def observe(self, state):
        return np.column_stack([state[:, 0] / POINTBOT_TARGET_X, state[:, 1], np.ones(len(state))])

    def step_batch(self, state, actions, rng):
        p = self.params
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(-1), -1.0, 1.0)
        x, v = state[:, 0], state[:, 1]
        v2 = v + POINTBOT_DT * (p.power * a - p.friction * v) / p.mass
        x2 = x + POINTBOT_DT * v2
        done = x2 >= POINTBOT_TARGET_X
        reward = (x2 - x) - POINTBOT_CONTROL_COST * a * a + np.where(done, POINTBOT_SUCCESS_BONUS, 0.0)
        return np.column_stack([x2, v2]), reward, done


# ---------------------------------------------------------------------------
# candidate sets


@dataclass(frozen=True)
class DynamicsCandidate:
    label: str
    family: str  # "slipgrid" | "pointbot"
    params: Any

    def make_env(self, spec: MdpSpec | None = None):
        if self.family == "pointbot":
            return PointBotEnv(self.params)
        if self.family == "slipgrid":
            return SlipGridEnv(self.params, spec)
        raise ValueError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class CandidateSet:
    family: str
    candidates: tuple[DynamicsCandidate, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(self.candidates) < 2:
            raise ValueError("a candidate set needs at least two candidates")
        labels = [c.label for c in self.candidates]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate candidate labels: {labels}")
        if any(c.family != self.family for c in self.candidates):
            raise ValueError("all candidates must belong to the set's family")

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.candidates]

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "candidates": [{"label": c.label, **c.params.to_json()} for c in self.candidates],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CandidateSet":
        family = d["family"]
        parser = {"pointbot": PointBotParams.from_json, "slipgrid": SlipGridParams.from_json}[family]
        cands = [DynamicsCandidate(c["label"], family, parser(c)) for c in d["candidates"]]
        return cls(family, tuple(cands))


def save_candidate_set(cs: CandidateSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(cs.to_json(), fh, indent=2)


def load_candidate_set(path) -> CandidateSet:
    with open(path) as fh:
        return CandidateSet.from_json(json.load(fh))


def _pointbot_set(down: float, up: float) -> CandidateSet:
    base = POINTBOT_BASELINE

    def cand(label, key, factor):
        params = dict(base)
        params[key] = base[key] * factor
        return DynamicsCandidate(label, "pointbot", PointBotParams(**params))

    return CandidateSet("pointbot", (
        cand("LightTorso", "mass", down),
        cand("HeavyTorso", "mass", up),
        cand("SlipperyJoints", "friction", down),
        cand("RoughJoints", "friction", up),
        cand("Weak", "power", down),
        cand("Strong", "power", up),
    ))


SLIPGRID6_PROBS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.3)
SLIPGRID_MOVE_PENALTY = -0.01


def builtin_candidate_set(name: str, down: float = 0.5, up: float = 2.0) -> CandidateSet:
    if name == "pointbot6":
        return _pointbot_set(down, up)
    if name == "pointbot_extreme":
        return _pointbot_set(0.1, 10.0)
    if name == "slipgrid6":
        base = parse_map(SLIPGRID_BASE_MAP)
        return CandidateSet("slipgrid", tuple(
            DynamicsCandidate(f"slip{p:.2f}", "slipgrid", SlipGridParams(base, p, SLIPGRID_MOVE_PENALTY))
            for p in SLIPGRID6_PROBS
        ))
    raise ValueError(f"unknown candidate set {name!r}")
