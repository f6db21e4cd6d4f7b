"""Agents under attack: DQN and REINFORCE on the grid families, and a
Gaussian REINFORCE learner for PointBot."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .env_families import GridEnv, PointBotEnv
from .gridworld import greedy_rollout_success
from .neuralnet import (
    AdamState,
    Head,
    MlpPolicy,
    OptimizerConfig,
    apply_update,
    backward,
    forward,
    log_softmax,
    mlp_init,
    optimizer_step,
)

log = logging.getLogger(__name__)

GRID_NET_DIMS = (8, 64, 64, 5)
POINTBOT_NET_DIMS = (3, 32, 32, 1)


@dataclass(frozen=True)
class DqnConfig:
    total_steps: int = 150_000
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_decay_end_step: int = 100_000
    replay_capacity: int = 10_000
    batch_size: int = 32
    target_sync_interval: int = 500
    gamma: float = 0.95
    lr: float = 1e-3
    learning_starts: int = 500
    eval_interval: int = 5_000
    goal_rate_target: float = 0.95
    net_dims: tuple[int, ...] = GRID_NET_DIMS

    def __post_init__(self):
        if not self.eps_start >= self.eps_end >= 0:
            raise ValueError("need eps_start >= eps_end >= 0")
        if self.eps_decay_end_step > max(self.total_steps, 0) and self.total_steps > 0:
            raise ValueError("eps_decay_end_step must not exceed total_steps")


@dataclass(frozen=True)
class PgConfig:
    total_episodes: int = 30_000
    gamma: float = 0.95
    lr: float = 3e-3
    entropy_coef: float = 0.01
    baseline_momentum: float = 0.95
    batch_episodes: int = 16
    normalize_advantages: bool = False
    entropy_coef_start: float | None = 0.1
    entropy_anneal_episodes: int = 10_000
    eval_interval: int = 1_600
    goal_rate_target: float = 0.95
    net_dims: tuple[int, ...] = GRID_NET_DIMS

    def __post_init__(self):
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")


@dataclass(frozen=True)
class GaussianPgConfig:
    total_episodes: int = 400
    gamma: float = 0.99
    lr: float = 3e-3
    batch_episodes: int = 16
    baseline_momentum: float = 0.9
    init_log_std: float = -0.5
    net_dims: tuple[int, ...] = POINTBOT_NET_DIMS


@dataclass(frozen=True)
class RewardStats:
    returns: tuple[float, ...]
    mean: float
    variance: float

    @classmethod
    def from_returns(cls, returns) -> "RewardStats":
        r = np.asarray(returns, dtype=np.float64)
        return cls(tuple(float(x) for x in r), float(r.mean()), float(r.var()))


def epsilon_at(step: int, eps_start: float, eps_end: float, decay_end: int) -> float:
    if decay_end <= 0 or step >= decay_end:
        return eps_end
    return eps_start + (eps_end - eps_start) * (step / decay_end)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self._next
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(self.size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


def grid_goal_rate(policy: MlpPolicy, env: GridEnv) -> float:
    """Fraction of free start cells from which the greedy policy reaches the goal."""
    m = env.map
    actions = np.zeros(m.size, dtype=np.int64)
    actions[m.free_cells] = policy.greedy_action(env.observe(m.free_cells))
    ok = greedy_rollout_success(m, actions, env.horizon)
    starts = m.free_cells != m.goal
    return float(ok[starts].mean())


def _check_grid_env(env):
    if not isinstance(env, GridEnv):
        raise TypeError("this trainer needs a Grid World environment")


def train_dqn(env: GridEnv, cfg: DqnConfig = DqnConfig(), seed: int = 0, progress=None) -> MlpPolicy:
    _check_grid_env(env)
    rng = np.random.default_rng(seed)
    params = mlp_init(cfg.net_dims, rng)
    policy = MlpPolicy(params, Head.Q_VALUES, env.input_contract, meta={"algo": "dqn", "seed": seed})
    if cfg.total_steps <= 0:
        return policy
    opt = OptimizerConfig("adam", cfg.lr)
    state = AdamState()
    target = params.copy()
    buf = ReplayBuffer(cfg.replay_capacity, env.obs_dim)

    cell = env.reset_batch(rng, 1)
    obs = env.observe(cell)[0]
    ep_t = 0
    rows = np.arange(cfg.batch_size)
    for t in range(cfg.total_steps):
        eps = epsilon_at(t, cfg.eps_start, cfg.eps_end, cfg.eps_decay_end_step)
        if rng.random() < eps:
            action = int(rng.integers(env.n_actions))
        else:
            action = int(np.argmax(forward(params, obs)))
        cell, reward, done = env.step_batch(cell, np.array([action]), rng)
        next_obs = env.observe(cell)[0]
        ep_t += 1
        buf.add(obs, action, reward[0], next_obs, done[0])
        obs = next_obs
        if done[0] or ep_t >= env.horizon:
            cell = env.reset_batch(rng, 1)
            obs = env.observe(cell)[0]
            ep_t = 0

        if len(buf) >= max(cfg.learning_starts, cfg.batch_size):
            o, a, r, o2, d = buf.sample(rng, cfg.batch_size)
            q_next = forward(target, o2).max(axis=1)
            y = r + cfg.gamma * (1.0 - d) * q_next
            q = forward(params, o)
            upstream = np.zeros_like(q)
            upstream[rows, a] = 2.0 * (q[rows, a] - y) / cfg.batch_size
            params, state = optimizer_step(params, backward(params, o, upstream), opt, state)
            policy.params = params

        if (t + 1) % cfg.target_sync_interval == 0:
            target = params.copy()
        if (t + 1) % cfg.eval_interval == 0:
            rate = grid_goal_rate(policy, env)
            if progress is not None:
                progress(t + 1, eps, rate)
            if rate >= cfg.goal_rate_target:
                log.debug("dqn converged at step %d (goal rate %.3f)", t + 1, rate)
                policy.meta["steps"] = t + 1
                break
    else:
        policy.meta["steps"] = cfg.total_steps
    policy.params = params
    return policy


@dataclass
class Rollout:
    obs: np.ndarray       # (T, B, d)
    actions: np.ndarray   # (T, B) or (T, B, k)
    rewards: np.ndarray   # (T, B)
    alive: np.ndarray     # (T, B) step was taken inside the episode

    @property
    def episode_returns(self) -> np.ndarray:
        return (self.rewards * self.alive).sum(axis=0)


def rollout(policy: MlpPolicy, env, n: int, rng: np.random.Generator, deterministic: bool = False) -> Rollout:
    """Run ``n`` episodes in lockstep until all terminate or hit the horizon."""
    state = env.reset_batch(rng, n)
    alive = np.ones(n, dtype=bool)
    obs_l, act_l, rew_l, alive_l = [], [], [], []
    for _ in range(env.horizon):
        obs = env.observe(state)
        action = policy.act(obs, rng, deterministic=deterministic)
        state, reward, done = env.step_batch(state, action, rng)
        obs_l.append(obs)
        act_l.append(action)
        rew_l.append(np.where(alive, reward, 0.0))
        alive_l.append(alive.copy())
        alive = alive & ~done
        if not alive.any():
            break
    return Rollout(np.array(obs_l), np.array(act_l), np.array(rew_l), np.array(alive_l))


def discounted_returns(rewards: np.ndarray, alive: np.ndarray, gamma: float) -> np.ndarray:
    g = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in reversed(range(rewards.shape[0])):
        acc = rewards[t] + gamma * acc * alive[t]
        g[t] = acc * alive[t]
    return g


def reinforce_logit_grad(logits: np.ndarray, actions: np.ndarray, advantages: np.ndarray,
                         entropy_coef: float) -> np.ndarray:
    """Gradient of ``-(adv * log pi(a) + c * H(pi))`` w.r.t. logits, per row."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    n = len(actions)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), actions] = 1.0
    g = -(onehot - p) * advantages[:, None]
    if entropy_coef:
        # dH/dz_j = -p_j (log p_j + H)
        ent = -(p * lp).sum(axis=1, keepdims=True)
        g += entropy_coef * p * (lp + ent)
    return g


def train_pg(env: GridEnv, cfg: PgConfig = PgConfig(), seed: int = 0, progress=None) -> MlpPolicy:
    _check_grid_env(env)
    rng = np.random.default_rng(seed)
    params = mlp_init(cfg.net_dims, rng)
    policy = MlpPolicy(params, Head.LOGITS, env.input_contract, meta={"algo": "pg", "seed": seed})
    opt = OptimizerConfig("adam", cfg.lr)
    state = AdamState()
    baseline = 0.0
    seen = 0
    next_eval = cfg.eval_interval
    is_plain_grid = type(env) is GridEnv
    while seen < cfg.total_episodes:
        batch = min(cfg.batch_episodes, cfg.total_episodes - seen)
        ro = rollout(policy, env, batch, rng)
        seen += batch
        g = discounted_returns(ro.rewards, ro.alive, cfg.gamma)
        mask = ro.alive.reshape(-1)
        obs = ro.obs.reshape(-1, env.obs_dim)[mask]
        acts = ro.actions.reshape(-1)[mask]
        rets = g.reshape(-1)[mask]
        adv = rets - baseline
        baseline = cfg.baseline_momentum * baseline + (1 - cfg.baseline_momentum) * rets.mean()
        if cfg.normalize_advantages and len(adv) > 1:
            adv = adv / (adv.std() + 1e-8)
        logits = forward(params, obs)
        upstream = reinforce_logit_grad(logits, acts, adv, _entropy_coef(cfg, seen)) / len(acts)
        params, state = optimizer_step(params, backward(params, obs, upstream), opt, state)
        policy.params = params
        if seen >= next_eval:
            next_eval += cfg.eval_interval
            if is_plain_grid:
                rate = grid_goal_rate(policy, env)
                if progress is not None:
                    progress(seen, float(np.mean(ro.episode_returns)), rate)
                if rate >= cfg.goal_rate_target and _pg_peaked(policy, env):
                    break
            elif progress is not None:
                progress(seen, float(np.mean(ro.episode_returns)), float("nan"))
    policy.meta["episodes"] = seen
    return policy


def _entropy_coef(cfg: PgConfig, episodes: int) -> float:
    if cfg.entropy_coef_start is None or episodes >= cfg.entropy_anneal_episodes:
        return cfg.entropy_coef
    frac = episodes / cfg.entropy_anneal_episodes
    return cfg.entropy_coef_start + (cfg.entropy_coef - cfg.entropy_coef_start) * frac


def _pg_peaked(policy: MlpPolicy, env: GridEnv, level: float = 0.99) -> bool:
    probs = policy.action_probs(env.observe(env.start_cells))
    return bool(np.min(probs.max(axis=1)) >= level)


def train_gaussian_pg(env: PointBotEnv, cfg: GaussianPgConfig = GaussianPgConfig(), seed: int = 0,
                      progress=None) -> MlpPolicy:
    if not isinstance(env, PointBotEnv):
        raise TypeError("train_gaussian_pg needs a PointBot environment")
    rng = np.random.default_rng(seed)
    params = mlp_init(cfg.net_dims, rng)
    policy = MlpPolicy(params, Head.GAUSSIAN, env.input_contract,
                       log_std=np.full(cfg.net_dims[-1], cfg.init_log_std),
                       meta={"algo": "gpg", "seed": seed})
    opt = OptimizerConfig("adam", cfg.lr)
    state = AdamState()
    baseline = 0.0
    seen = 0
    while seen < cfg.total_episodes:
        batch = min(cfg.batch_episodes, cfg.total_episodes - seen)
        ro = rollout(policy, env, batch, rng)
        seen += batch
        g = discounted_returns(ro.rewards, ro.alive, cfg.gamma)
        mask = ro.alive.reshape(-1)
        obs = ro.obs.reshape(-1, env.obs_dim)[mask]
        acts = ro.actions.reshape(-1, env.n_actions)[mask]
        rets = g.reshape(-1)[mask]
        adv = rets - baseline
        baseline = cfg.baseline_momentum * baseline + (1 - cfg.baseline_momentum) * rets.mean()
        mu = forward(params, obs)
        mean_grad, log_std_grad = gaussian_logp_grads(mu, policy.log_std, acts)
        n = len(rets)
        upstream = -(mean_grad * adv[:, None]) / n
        g_log_std = -(log_std_grad * adv[:, None]).sum(axis=0) / n
        arrays, state = apply_update(
            params.arrays() + [policy.log_std],
            backward(params, obs, upstream).arrays() + [g_log_std],
            opt, state,
        )
        params = type(params)(params.layer_dims, arrays[0:-1:2], arrays[1:-1:2])
        policy.params = params
        policy.log_std = arrays[-1]
        if progress is not None:
            progress(seen, float(np.mean(ro.episode_returns)), float(policy.log_std[0]))
    policy.meta["episodes"] = seen
    return policy


def gaussian_logp_grads(mu: np.ndarray, log_std: np.ndarray, actions: np.ndarray):
    """Per-sample d log N(a; mu, exp(log_std)^2) w.r.t. mu and log_std."""
    var = np.exp(2 * log_std)
    diff = actions - mu
    return diff / var, diff * diff / var - 1.0


def evaluate_policy(policy: MlpPolicy, env, episodes: int, seed: int = 0,
                    deterministic: bool = False) -> RewardStats:
    """Undiscounted episodic returns of ``episodes`` rollouts."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if policy.input_contract != env.input_contract or policy.obs_dim != env.obs_dim:
        raise ValueError(
            f"policy expects {policy.input_contract!r} input, env provides {env.input_contract!r}"
        )
    rng = np.random.default_rng(seed)
    ro = rollout(policy, env, episodes, rng, deterministic=deterministic)
    return RewardStats.from_returns(ro.episode_returns)
