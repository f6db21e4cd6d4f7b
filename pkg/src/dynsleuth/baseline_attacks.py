"""Comparison searchers for floor-plan recovery: random sampling and a DQN
that edits a guessed map one cell at a time. Both score maps with the same
``FitnessEvaluator`` the genetic search uses."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ga_attack import (
    BlackBoxPolicy,
    FitnessConfig,
    FitnessEvaluator,
    GaHistory,
    MapSpace,
    SearchResult,
    recovery_rate,
)
from .gridworld import GridMap, is_valid
from .neuralnet import AdamState, OptimizerConfig, backward, forward, mlp_init, optimizer_step
from .trainers import ReplayBuffer, epsilon_at


def _budget_check(max_evaluations, max_seconds):
    if max_evaluations is None and max_seconds is None:
        raise ValueError("give max_evaluations and/or max_seconds")
    if max_evaluations is not None and max_evaluations < 1:
        raise ValueError("max_evaluations must be >= 1")
    if max_seconds is not None and not max_seconds > 0:
        raise ValueError("max_seconds must be positive")


def random_search(
    target: BlackBoxPolicy,
    fitness_cfg: FitnessConfig,
    space: MapSpace,
    max_evaluations: int | None = 20_000,
    max_seconds: float | None = None,
    seed: int = 0,
    evaluator: FitnessEvaluator | None = None,
    truth: GridMap | None = None,
    chunk: int = 64,
    score_many: Callable[[list[np.ndarray]], list[float]] | None = None,
) -> SearchResult:
    """Sample valid maps until the budget runs out; keep the best.

    Sample ``i`` comes from its own stream ``default_rng([seed, i])`` so the
    sequence does not depend on how scoring is chunked or parallelised.
    Every sampled map costs one fitness call.
    """
    _budget_check(max_evaluations, max_seconds)
    t0 = time.perf_counter()
    evaluator = evaluator or FitnessEvaluator(target, fitness_cfg, space)
    score_many = score_many or (lambda gs: [evaluator(g) for g in gs])
    best_bits, best_score = None, -np.inf
    history = GaHistory()
    used = 0
    while True:
        n = chunk if max_evaluations is None else min(chunk, max_evaluations - used)
        if n <= 0:
            break
        if max_seconds is not None and used and time.perf_counter() - t0 >= max_seconds:
            break
        genomes = [space.random_genome(np.random.default_rng([seed, used + k])) for k in range(n)]
        scores = score_many(genomes)
        for g, s in zip(genomes, scores):
            if s > best_score:
                best_bits, best_score = g, s
        used += n
        history.best_fitness.append(float(best_score))
        history.mean_fitness.append(float(np.mean(scores)))
        if truth is not None:
            history.mean_recovery.append(recovery_rate(space.decode(best_bits), truth))
    return SearchResult(space.decode(best_bits), float(best_score), used, history, seed,
                        time.perf_counter() - t0)


@dataclass(frozen=True)
class RlSearchConfig:
    total_steps: int = 250_000
    episode_limit: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_decay_end_step: int = 240_000
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.95
    lr: float = 1e-3
    replay_capacity: int = 10_000
    batch_size: int = 32
    target_sync_interval: int = 500
    learning_starts: int = 500
    delta_reward: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.episode_limit < 1:
            raise ValueError("total_steps and episode_limit must be >= 1")
        if not self.eps_start >= self.eps_end >= 0:
            raise ValueError("need eps_start >= eps_end >= 0")
        if self.eps_decay_end_step > self.total_steps:
            raise ValueError("eps_decay_end_step must not exceed total_steps")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must hold at least one batch")


def rl_search_net_dims(space: MapSpace, cfg: RlSearchConfig) -> tuple[int, ...]:
    """State and action width both equal the number of grid cells."""
    return (space.length, *cfg.hidden, space.length)


def rl_search(
    target: BlackBoxPolicy,
    fitness_cfg: FitnessConfig,
    space: MapSpace,
    cfg: RlSearchConfig = RlSearchConfig(),
    evaluator: FitnessEvaluator | None = None,
    max_evaluations: int | None = None,
    truth: GridMap | None = None,
) -> SearchResult:
    """DQN over the map-editing MDP.

    State is the current genome, action ``i`` flips cell ``i`` (a no-op on
    the goal). A flip that breaks the floor-plan constraints is undone and
    earns 0. Otherwise the reward is the new map's fitness, or its change
    when ``delta_reward`` is set. Stops early once ``max_evaluations``
    distinct maps have been scored.
    """
    t0 = time.perf_counter()
    evaluator = evaluator or FitnessEvaluator(target, fitness_cfg, space)
    n = space.length
    rng = np.random.default_rng([cfg.seed, 0])
    params = mlp_init(rl_search_net_dims(space, cfg), rng)
    tgt = params.copy()
    opt = OptimizerConfig("adam", cfg.lr)
    opt_state = AdamState()
    buf = ReplayBuffer(cfg.replay_capacity, n)
    rows = np.arange(cfg.batch_size)

    episode = 0
    state = space.random_genome(np.random.default_rng([cfg.seed, 1, episode]))
    score = evaluator(state)
    best_bits, best_score = state.copy(), score
    history = GaHistory(best_fitness=[float(best_score)])
    ep_t = 0
    for t in range(cfg.total_steps):
        eps = epsilon_at(t, cfg.eps_start, cfg.eps_end, cfg.eps_decay_end_step)
        x = state.astype(np.float64)
        if rng.random() < eps:
            action = int(rng.integers(n))
        else:
            action = int(np.argmax(forward(params, x)))

        nxt = state.copy()
        if action != space.goal:
            nxt[action] ^= 1
        if action == space.goal:
            new_score = score
            reward = 0.0 if cfg.delta_reward else score
        elif is_valid(space.decode(nxt)):
            new_score = evaluator(nxt)
            reward = new_score - score if cfg.delta_reward else new_score
        else:
            nxt, new_score, reward = state, score, 0.0
        ep_t += 1
        done = ep_t >= cfg.episode_limit
        # the step limit is a time-out, not a terminal state, so keep bootstrapping
        buf.add(x, action, reward, nxt.astype(np.float64), False)
        state, score = nxt, new_score
        if score > best_score:
            best_bits, best_score = state.copy(), score
        if done:
            episode += 1
            state = space.random_genome(np.random.default_rng([cfg.seed, 1, episode]))
            score = evaluator(state)
            if score > best_score:
                best_bits, best_score = state.copy(), score
            ep_t = 0

        if len(buf) >= max(cfg.learning_starts, cfg.batch_size):
            o, a, r, o2, _ = buf.sample(rng, cfg.batch_size)
            y = r + cfg.gamma * forward(tgt, o2).max(axis=1)
            q = forward(params, o)
            upstream = np.zeros_like(q)
            upstream[rows, a] = 2.0 * (q[rows, a] - y) / cfg.batch_size
            params, opt_state = optimizer_step(params, backward(params, o, upstream), opt, opt_state)
        if (t + 1) % cfg.target_sync_interval == 0:
            tgt = params.copy()
        if (t + 1) % 1000 == 0:
            history.best_fitness.append(float(best_score))
            if truth is not None:
                history.mean_recovery.append(recovery_rate(space.decode(best_bits), truth))
        if max_evaluations is not None and evaluator.evaluations >= max_evaluations:
            break
    history.best_fitness.append(float(best_score))
    return SearchResult(space.decode(best_bits), float(best_score), evaluator.evaluations, history,
                        cfg.seed, time.perf_counter() - t0)


__all__ = ["RlSearchConfig", "random_search", "rl_search", "rl_search_net_dims"]
