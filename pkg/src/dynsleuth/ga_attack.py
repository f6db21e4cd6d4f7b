"""Floor-plan recovery by genetic search over constraint-valid maps.

A candidate map is scored by how often a black-box target policy, fed the
LiDAR readings the candidate would produce, behaves like the candidate's own
optimal policy. The map that best explains the target wins.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .gridworld import (
    GenerationFailed,
    GridMap,
    MdpSpec,
    N_ACTIONS,
    boltzmann_policy,
    free_observations,
    is_valid,
    random_map,
    value_iteration,
)
from .neuralnet import Head, MlpPolicy

log = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-9


class BlackBoxPolicy:
    """Query-only view of a target policy.

    Exposes the action distribution and the greedy action for a batch of
    observations, and counts queries. Parameters are never handed out.
    """

    def __init__(self, policy: MlpPolicy):
        if policy.head is Head.GAUSSIAN:
            raise ValueError("map attacks need a discrete-action policy")
        self._policy = policy
        self.kind = "dqn" if policy.head is Head.Q_VALUES else "pg"
        self.queries = 0

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        self.queries += len(obs)
        return self._policy.action_probs(obs)

    def greedy_action(self, obs: np.ndarray) -> np.ndarray:
        self.queries += len(obs)
        return self._policy.greedy_action(obs)


@dataclass(frozen=True)
class FitnessConfig:
    delta_kind: str = "exact"  # "exact" | "l2"
    epsilon: float = 0.02
    oracle: str = "value_iteration"  # "value_iteration" | "trained"
    temperature: float = 0.01
    normalize: bool = False
    tie_aware: bool = True
    mdp: MdpSpec = field(default_factory=MdpSpec)
    vi_tolerance: float = 1e-8

    def __post_init__(self):
        if self.delta_kind not in ("exact", "l2"):
            raise ValueError(f"unknown delta_kind {self.delta_kind!r}")
        if self.oracle not in ("value_iteration", "trained"):
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if self.delta_kind == "l2" and not self.epsilon > 0:
            raise ValueError("epsilon must be positive for the L2 metric")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def for_agent(cls, kind: str, **overrides) -> "FitnessConfig":
        """Defaults per agent kind: exact match for DQN, L2 for PG."""
        base = {"dqn": {"delta_kind": "exact"}, "pg": {"delta_kind": "l2"}}[kind]
        return cls(**{**base, **overrides})


@dataclass(frozen=True)
class MapSpace:
    """What the attacker knows a priori: grid shape and goal location."""

    width: int
    height: int
    goal: int
    init_density: float = 0.3

    @property
    def length(self) -> int:
        return self.width * self.height

    def decode(self, bits: np.ndarray) -> GridMap:
        return GridMap(self.width, self.height, bits, self.goal)

    def random_genome(self, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
        m = random_map(self.width, self.height, self.goal, self.init_density, rng, max_tries)
        return m.cells.copy()

    @classmethod
    def of(cls, m: GridMap, init_density: float = 0.3) -> "MapSpace":
        return cls(m.width, m.height, m.goal, init_density)


# ---------------------------------------------------------------------------
# fitness


def project_to_capped_simplex(p: np.ndarray, mask: np.ndarray, mass: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row's masked entries onto
    ``{x >= 0, sum(x) = mass}``; unmasked entries come back as 0."""
    u = np.where(mask, p, -np.inf)
    us = -np.sort(-u, axis=1)
    finite = np.isfinite(us)
    cs = np.cumsum(np.where(finite, us, 0.0), axis=1)
    k = np.arange(1, p.shape[1] + 1)
    cond = finite & (us - (cs - mass[:, None]) / k > 0)
    rho = np.maximum(cond.sum(axis=1), 1)
    theta = (cs[np.arange(len(p)), rho - 1] - mass) / rho
    return np.where(mask, np.maximum(p - theta[:, None], 0.0), 0.0)


def optimal_action_mask(q: np.ndarray, tol: float = TIE_TOLERANCE) -> np.ndarray:
    return q >= q.max(axis=1, keepdims=True) - tol


def l2_to_oracle(p_target: np.ndarray, p_oracle: np.ndarray, tie_mask: np.ndarray | None) -> np.ndarray:
    """Per-row L2 distance from the target distribution to the oracle.

    With a tie mask, the oracle is the set of distributions that agree with
    ``p_oracle`` off the mask and split the masked mass arbitrarily.
    """
    if tie_mask is None:
        return np.linalg.norm(p_target - p_oracle, axis=1)
    off = np.where(tie_mask, 0.0, p_target - p_oracle)
    mass = np.where(tie_mask, p_oracle, 0.0).sum(axis=1)
    proj = project_to_capped_simplex(p_target, tie_mask, mass)
    on = np.where(tie_mask, p_target - proj, 0.0)
    return np.sqrt((off**2).sum(axis=1) + (on**2).sum(axis=1))


def agreement(
    target: BlackBoxPolicy,
    m: GridMap,
    cfg: FitnessConfig,
    oracle_policy: MlpPolicy | None = None,
) -> np.ndarray:
    """Per-free-cell similarity indicator between target and the map's oracle."""
    obs = free_observations(m)
    if cfg.oracle == "trained":
        if oracle_policy is None:
            raise ValueError("trained oracle selected but no oracle policy given")
        if cfg.delta_kind == "exact":
            return (target.greedy_action(obs) == oracle_policy.greedy_action(obs)).astype(np.float64)
        dist = np.linalg.norm(target.action_probs(obs) - oracle_policy.action_probs(obs), axis=1)
        return (dist < cfg.epsilon).astype(np.float64)

    q = value_iteration(m, cfg.mdp, cfg.vi_tolerance).values
    if cfg.delta_kind == "exact":
        a = target.greedy_action(obs)
        if cfg.tie_aware:
            hit = optimal_action_mask(q)[np.arange(len(a)), a]
        else:
            hit = a == np.argmax(q, axis=1)
        return hit.astype(np.float64)
    p_oracle = boltzmann_policy(q, cfg.temperature)
    tie_mask = optimal_action_mask(q) if cfg.tie_aware else None
    dist = l2_to_oracle(target.action_probs(obs), p_oracle, tie_mask)
    return (dist < cfg.epsilon).astype(np.float64)


def fitness(candidate, target: BlackBoxPolicy, cfg: FitnessConfig, space: MapSpace | None = None,
            oracle_policy: MlpPolicy | None = None) -> float:
    """Similarity score of one candidate map (or genome, given ``space``)."""
    m = candidate if isinstance(candidate, GridMap) else space.decode(candidate)
    if not is_valid(m):
        raise ValueError("candidate map violates floor-plan constraints")
    hits = agreement(target, m, cfg, oracle_policy)
    score = float(hits.sum())
    return score / len(hits) if cfg.normalize else score


class FitnessEvaluator:
    """Memoized fitness over genomes for one target; counts real evaluations.

    Shared by every searcher so they consume the identical scoring function.
    """

    def __init__(self, target: BlackBoxPolicy, cfg: FitnessConfig, space: MapSpace,
                 trained_oracle: Callable[[GridMap], MlpPolicy] | None = None):
        self.target = target
        self.cfg = cfg
        self.space = space
        self.trained_oracle = trained_oracle
        self._cache: dict[bytes, float] = {}
        self.evaluations = 0
        self.calls = 0

    def __call__(self, bits: np.ndarray) -> float:
        self.calls += 1
        key = np.asarray(bits, dtype=np.uint8).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        m = self.space.decode(bits)
        oracle = self.trained_oracle(m) if self.cfg.oracle == "trained" else None
        score = fitness(m, self.target, self.cfg, oracle_policy=oracle)
        self.evaluations += 1
        self._cache[key] = score
        return score

    def score_uncached(self, bits: np.ndarray) -> float:
        """Always recompute; counts as an evaluation."""
        self.calls += 1
        self.evaluations += 1
        m = self.space.decode(bits)
        oracle = self.trained_oracle(m) if self.cfg.oracle == "trained" else None
        return fitness(m, self.target, self.cfg, oracle_policy=oracle)


# ---------------------------------------------------------------------------
# genetic operators


def two_point_crossover(parent1: np.ndarray, parent2: np.ndarray, rng: np.random.Generator,
                        goal: int | None = None, points: tuple[int, int] | None = None) -> np.ndarray:
    if len(parent1) != len(parent2):
        raise ValueError("parents differ in length")
    n = len(parent1)
    if points is None:
        a, b = np.sort(rng.integers(0, n + 1, size=2))
    else:
        a, b = points
        if not 0 <= a <= b <= n:
            raise ValueError(f"need 0 <= a <= b <= {n}, got {points}")
    child = np.concatenate([parent1[:a], parent2[a:b], parent1[b:]]).astype(np.uint8)
    if goal is not None:
        child[goal] = 0
    return child


def mutate(genome: np.ndarray, beta: float, rng: np.random.Generator, goal: int | None = None) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("mutation rate must lie in [0, 1]")
    flips = rng.random(len(genome)) < beta
    if goal is not None:
        flips[goal] = False
    return np.where(flips, 1 - genome, genome).astype(np.uint8)


def tournament_select(scores, rng: np.random.Generator) -> int:
    """Index of the winner of a two-way tournament (draws with replacement)."""
    n = len(scores)
    if n == 0:
        raise ValueError("empty population")
    i, j = rng.integers(n, size=2)
    if scores[i] > scores[j] or (scores[i] == scores[j] and i <= j):
        return int(i)
    return int(j)


def recovery_rate(predicted: GridMap, truth: GridMap) -> float:
    if (predicted.width, predicted.height, predicted.goal) != (truth.width, truth.height, truth.goal):
        raise ValueError("maps differ in shape or goal")
    scored = np.ones(truth.size, dtype=bool)
    scored[truth.goal] = False
    if not scored.any():
        return 1.0
    return float(np.mean(predicted.cells[scored] == truth.cells[scored]))


# ---------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 64
    elite_size: int = 8
    generations: int = 150
    mutation_rate: float = 0.05
    seed: int = 0
    max_child_retries: int = 50

    def __post_init__(self):
        if not 0 < self.elite_size < self.population_size:
            raise ValueError("need 0 < elite_size < population_size")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.generations < 0 or self.max_child_retries < 1:
            raise ValueError("generations must be >= 0 and max_child_retries >= 1")


@dataclass
class GaHistory:
    mean_fitness: list[float] = field(default_factory=list)
    best_fitness: list[float] = field(default_factory=list)
    mean_recovery: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SearchResult:
    best_map: GridMap
    best_score: float
    evaluations: int
    history: GaHistory | None = None
    seed: int | None = None
    seconds: float = 0.0


def _child_rng(seed: int, generation: int, index: int) -> np.random.Generator:
    # generation -1 seeds the initial population
    return np.random.default_rng([seed, generation + 1, index])


def ga_search(
    target: BlackBoxPolicy,
    cfg: GaConfig,
    fitness_cfg: FitnessConfig,
    space: MapSpace,
    truth: GridMap | None = None,
    evaluator: FitnessEvaluator | None = None,
    score_many: Callable[[list[np.ndarray]], list[float]] | None = None,
) -> SearchResult:
    """Evolve constraint-valid maps toward the highest similarity score.

    ``score_many`` may map scoring over a worker pool; by default genomes
    are scored in-process through ``evaluator``.
    """
    t0 = time.perf_counter()
    evaluator = evaluator or FitnessEvaluator(target, fitness_cfg, space)
    score_many = score_many or (lambda gs: [evaluator(g) for g in gs])
    L, n = cfg.population_size, cfg.elite_size

    try:
        population = [space.random_genome(_child_rng(cfg.seed, -1, i)) for i in range(L)]
    except GenerationFailed as exc:
        raise RuntimeError(f"could not build {L} valid initial genomes: {exc}") from exc

    history = GaHistory()
    for gen in range(cfg.generations + 1):
        scores = np.asarray(score_many(population), dtype=np.float64)
        # stable sort keeps lower index first among equal scores
        order = np.argsort(-scores, kind="stable")
        population = [population[i] for i in order]
        scores = scores[order]
        history.mean_fitness.append(float(scores.mean()))
        if history.best_fitness and scores[0] < history.best_fitness[-1]:
            raise AssertionError(f"elitism violated at generation {gen}")
        history.best_fitness.append(float(scores[0]))
        if truth is not None:
            history.mean_recovery.append(
                float(np.mean([recovery_rate(space.decode(g), truth) for g in population]))
            )
        if gen == cfg.generations:
            break
        nxt = [g.copy() for g in population[:n]]
        for j in range(n, L):
            rng = _child_rng(cfg.seed, gen, j)
            child = None
            for _ in range(cfg.max_child_retries):
                p1 = population[tournament_select(scores, rng)]
                p2 = population[tournament_select(scores, rng)]
                cand = mutate(two_point_crossover(p1, p2, rng, space.goal), cfg.mutation_rate, rng, space.goal)
                if is_valid(space.decode(cand)):
                    child = cand
                    break
            if child is None:
                child = space.random_genome(rng)
            nxt.append(child)
        population = nxt

    return SearchResult(
        best_map=space.decode(population[0]),
        best_score=float(scores[0]),
        evaluations=evaluator.evaluations,
        history=history,
        seed=cfg.seed,
        seconds=time.perf_counter() - t0,
    )


def ga_attack(
    target: BlackBoxPolicy,
    cfg: GaConfig,
    fitness_cfg: FitnessConfig,
    space: MapSpace,
    seeds=range(8),
    truth: GridMap | None = None,
) -> tuple[SearchResult, list[SearchResult]]:
    """Run the search once per seed and keep the highest-scored result."""
    runs = []
    for s in seeds:
        run_cfg = GaConfig(**{**asdict(cfg), "seed": int(s)})
        runs.append(ga_search(target, run_cfg, fitness_cfg, space, truth))
    best = max(runs, key=lambda r: r.best_score)  # first seed wins ties
    return best, runs


def enumerate_valid_maps(space: MapSpace) -> list[GridMap]:
    """Every constraint-valid map on a small grid (brute force, 2**(HW-1))."""
    free_bits = [i for i in range(space.length) if i != space.goal]
    if len(free_bits) > 20:
        raise ValueError("grid too large to enumerate")
    out = []
    for mask in range(1 << len(free_bits)):
        cells = np.zeros(space.length, dtype=np.uint8)
        for k, i in enumerate(free_bits):
            if mask >> k & 1:
                cells[i] = 1
        m = space.decode(cells)
        if is_valid(m):
            out.append(m)
    return out


__all__ = [
    "BlackBoxPolicy",
    "FitnessConfig",
    "FitnessEvaluator",
    "GaConfig",
    "GaHistory",
    "MapSpace",
    "N_ACTIONS",
    "SearchResult",
    "agreement",
    "enumerate_valid_maps",
    "fitness",
    "ga_attack",
    "ga_search",
    "l2_to_oracle",
    "mutate",
    "recovery_rate",
    "tournament_select",
    "two_point_crossover",
]
