"""Clipped-objective PPO with GAE, including the passive-learner update.

The policy is a diagonal Gaussian whose mean comes from an MLP and whose log
standard deviation is a free parameter vector. Observation and reward
normalisation follow the usual running-statistics wrappers and live outside
the agent, so they survive network resets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError
from .nn_core import (
    DenseNetwork,
    OptimizerState,
    adam_step,
    adam_update,
    backward,
    copy_into,
    forward,
    global_grad_norm,
    init_network,
    init_optimizer,
    predict,
)
from .seeding import SeedStream, derive_seed

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class PpoConfig:
    hidden_sizes: tuple[int, ...] = (64, 64)
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    update_epochs: int = 10
    num_minibatches: int = 32
    rollout_length: int = 2048
    normalize_advantages: bool = True
    passive_log_ratio_clamp: float = 5.0
    normalize_observations: bool = True
    normalize_rewards: bool = True


@dataclass
class PpoAgent:
    policy_net: DenseNetwork
    log_std: np.ndarray
    value_net: DenseNetwork
    policy_opt: OptimizerState
    log_std_opt: OptimizerState
    value_opt: OptimizerState
    config: PpoConfig
    seed: int = 0

    @property
    def action_dim(self) -> int:
        return self.log_std.shape[0]

    @property
    def observation_dim(self) -> int:
        return self.policy_net.input_dim

    def networks(self) -> dict[str, DenseNetwork]:
        return {"policy": self.policy_net, "value": self.value_net}


def make_ppo_agent(observation_dim: int, action_dim: int, seed: int, config: PpoConfig | None = None) -> PpoAgent:
    cfg = config or PpoConfig()
    hidden = list(cfg.hidden_sizes)
    policy = init_network([observation_dim, *hidden, action_dim], derive_seed(seed, "policy"))
    value = init_network([observation_dim, *hidden, 1], derive_seed(seed, "value"))
    log_std = np.zeros(action_dim)

    def opt(p):
        return init_optimizer(p, cfg.learning_rate, (0.9, 0.999), cfg.adam_epsilon)

    return PpoAgent(policy, log_std, value, opt(policy), opt([log_std]), opt(value), cfg, int(seed))


def reset_ppo_agent(agent: PpoAgent, seed: int) -> PpoAgent:
    fresh = make_ppo_agent(agent.observation_dim, agent.action_dim, seed, agent.config)
    copy_into(agent.policy_net, fresh.policy_net)
    copy_into(agent.value_net, fresh.value_net)
    agent.log_std[...] = 0.0
    for opt in (agent.policy_opt, agent.log_std_opt, agent.value_opt):
        opt.zero()
    agent.seed = int(seed)
    return agent


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def policy_log_prob(agent: PpoAgent, observations, actions) -> np.ndarray:
    return gaussian_log_prob(predict(agent.policy_net, observations), agent.log_std, np.asarray(actions))


def state_values(agent: PpoAgent, observations) -> np.ndarray:
    return predict(agent.value_net, observations)[..., 0]


class RunningMeanStd:
    """Parallel-update running mean and variance."""

    def __init__(self, shape=()):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = 1e-4

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape((-1, *self.mean.shape))
        b_mean, b_var, b_count = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total


@dataclass
class Normalizer:
    """Observation and reward scaling shared by every network acting in one run."""

    observation_dim: int
    gamma: float = 0.99
    normalize_observations: bool = True
    normalize_rewards: bool = True
    clip: float = 10.0
    obs_rms: RunningMeanStd = field(init=False)
    ret_rms: RunningMeanStd = field(init=False)
    discounted_return: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.obs_rms = RunningMeanStd((self.observation_dim,))
        self.ret_rms = RunningMeanStd(())

    def observation(self, obs: np.ndarray, update: bool = True) -> np.ndarray:
        if not self.normalize_observations:
            return np.asarray(obs, dtype=np.float64)
        if update:
            self.obs_rms.update(obs)
        z = (obs - self.obs_rms.mean) / np.sqrt(self.obs_rms.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def reward(self, reward: float, episode_over: bool) -> float:
        if not self.normalize_rewards:
            return float(reward)
        self.discounted_return = self.discounted_return * self.gamma + reward
        self.ret_rms.update(np.array([self.discounted_return]))
        out = reward / math.sqrt(float(self.ret_rms.var) + 1e-8)
        if episode_over:
            self.discounted_return = 0.0
        return float(np.clip(out, -self.clip, self.clip))


class EnvCursor:
    """Keeps an environment running across rollouts and records episode returns."""

    def __init__(self, env, seed_stream: SeedStream, normalizer: Normalizer):
        self.env = env
        self.seeds = seed_stream
        self.normalizer = normalizer
        self.raw_obs = env.reset(self.seeds.next())
        self.obs = normalizer.observation(self.raw_obs)
        self.episode_return = 0.0
        self.completed_returns: list[float] = []
        self.steps = 0


@dataclass
class Rollout:
    observations: np.ndarray
    actions: np.ndarray
    behavior_log_prob: np.ndarray
    rewards: np.ndarray
    env_rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap_value: float
    last_observation: np.ndarray
    raw_observations: np.ndarray
    raw_next_observations: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


def collect_rollout(agent: PpoAgent, cursor: EnvCursor, steps: int, rng: np.random.Generator) -> Rollout:
    """Act with ``agent`` for ``steps`` environment steps.

    Actions are sampled from the unclamped Gaussian and clipped only when
    handed to the environment; log-probabilities and values are those of
    ``agent`` at collection time. ``dones[t]`` marks that the episode ended
    (terminal or time limit) after step ``t``.
    """
    if steps < 1:
        raise PreconditionError("rollout needs at least one step")
    env = cursor.env
    low, high = env.spec.action_low, env.spec.action_high
    A, O = agent.action_dim, agent.observation_dim
    obs_buf = np.zeros((steps, O))
    raw_buf = np.zeros((steps, O))
    raw_next = np.zeros((steps, O))
    act_buf = np.zeros((steps, A))
    lp_buf = np.zeros(steps)
    rew_buf = np.zeros(steps)
    env_rew = np.zeros(steps)
    val_buf = np.zeros(steps)
    done_buf = np.zeros(steps)
    std = np.exp(agent.log_std)
    for t in range(steps):
        obs = cursor.obs
        mean = predict(agent.policy_net, obs)
        if not np.all(np.isfinite(mean)):
            raise NumericError("non-finite policy mean during collection")
        action = mean + std * rng.standard_normal(A)
        obs_buf[t] = obs
        raw_buf[t] = cursor.raw_obs
        act_buf[t] = action
        lp_buf[t] = gaussian_log_prob(mean, agent.log_std, action)
        val_buf[t] = predict(agent.value_net, obs)[0]
        res = env.step(np.clip(action, low, high))
        over = res.terminal or res.truncated
        raw_next[t] = res.observation
        env_rew[t] = res.reward
        rew_buf[t] = cursor.normalizer.reward(res.reward, over)
        done_buf[t] = float(over)
        cursor.episode_return += res.reward
        cursor.steps += 1
        if over:
            cursor.completed_returns.append(cursor.episode_return)
            cursor.episode_return = 0.0
            cursor.raw_obs = env.reset(cursor.seeds.next())
        else:
            cursor.raw_obs = res.observation
        cursor.obs = cursor.normalizer.observation(cursor.raw_obs)
    bootstrap = float(predict(agent.value_net, cursor.obs)[0])
    return Rollout(obs_buf, act_buf, lp_buf, rew_buf, env_rew, val_buf, done_buf, bootstrap,
                   cursor.obs.copy(), raw_buf, raw_next)


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalised advantage estimates and value targets.

    ``delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t`` and
    ``A_t = delta_t + gamma lam (1 - done_t) A_{t+1}``, with ``V_T`` the
    bootstrap value.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    adv = np.zeros(n)
    next_value = bootstrap_value
    last = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * live * next_value - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def rollout_gae(agent: PpoAgent, rollout: Rollout):
    """GAE over ``rollout`` using ``agent``'s own value function."""
    values = state_values(agent, rollout.observations)
    bootstrap = float(state_values(agent, rollout.last_observation))
    cfg = agent.config
    return compute_gae(rollout.rewards, values, rollout.dones, bootstrap, cfg.gamma, cfg.gae_lambda)


@dataclass
class PpoReport:
    policy_loss: float
    value_loss: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float
    minibatches: int


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_policy_loss(ratio: np.ndarray, adv: np.ndarray, clip_coef: float):
    """``-mean(min(r A, clip(r) A))`` and its derivative with respect to ``r``."""
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_coef, 1.0 + clip_coef) * adv
    loss = -float(np.mean(np.minimum(surr1, surr2)))
    d_ratio = np.where(surr1 <= surr2, -adv, 0.0) / len(adv)
    return loss, d_ratio


def minibatch_loss_and_grads(agent: PpoAgent, obs, actions, behavior_lp, adv, returns,
                             log_ratio_clamp: float | None = None):
    """Total PPO loss on one minibatch and the gradients of every parameter group."""
    cfg = agent.config
    n = len(adv)
    if cfg.normalize_advantages:
        adv = normalize_advantages(adv)
    ptr = forward(agent.policy_net, obs)
    mean = ptr.post[-1]
    ls = agent.log_std
    inv_std = np.exp(-ls)
    z = (actions - mean) * inv_std
    new_lp = np.sum(-0.5 * z * z - ls - HALF_LOG_2PI, axis=1)
    log_ratio = new_lp - behavior_lp
    if log_ratio_clamp is not None:
        inside = np.abs(log_ratio) < log_ratio_clamp
        log_ratio = np.clip(log_ratio, -log_ratio_clamp, log_ratio_clamp)
    with np.errstate(over="ignore"):
        ratio = np.exp(log_ratio)
    if not np.all(np.isfinite(ratio)):
        raise NumericError("non-finite probability ratio")
    pg_loss, d_ratio = clipped_policy_loss(ratio, adv, cfg.clip_coef)
    d_lp = d_ratio * ratio
    if log_ratio_clamp is not None:
        d_lp = d_lp * inside
    d_mean = d_lp[:, None] * z * inv_std
    d_ls = np.sum(d_lp[:, None] * (z * z - 1.0), axis=0) - cfg.ent_coef

    vtr = forward(agent.value_net, obs)
    v = vtr.post[-1][:, 0]
    err = v - returns
    v_loss = 0.5 * float(np.mean(err * err))
    entropy = float(np.sum(ls + 0.5 + HALF_LOG_2PI))
    total = pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * entropy
    if not math.isfinite(total):
        raise NumericError(f"non-finite PPO loss (policy {pg_loss}, value {v_loss})")

    pg = backward(agent.policy_net, ptr, d_mean)
    vg = backward(agent.value_net, vtr, (cfg.vf_coef * err / n)[:, None])
    stats = {
        "policy_loss": pg_loss,
        "value_loss": v_loss,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_coef)),
        "total": total,
    }
    return stats, pg, d_ls, vg


def clip_gradients(arrays: list[np.ndarray], max_norm: float) -> float:
    """Scale ``arrays`` in place so their joint norm is at most ``max_norm``; return the raw norm."""
    norm = global_grad_norm(arrays)
    coef = max_norm / (norm + 1e-6)
    if coef < 1.0:
        for a in arrays:
            a *= coef
    return norm


def _run_epochs(agent: PpoAgent, rollout: Rollout, advantages, returns, rng, log_ratio_clamp) -> PpoReport:
    cfg = agent.config
    n = len(rollout)
    if len(advantages) != n or len(returns) != n:
        raise ShapeError("advantages/returns not aligned with the rollout")
    mb = max(1, n // cfg.num_minibatches)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0}
    norm_sum, count = 0.0, 0
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n)
        for start in range(0, mb * (n // mb), mb):
            idx = order[start:start + mb]
            stats, pg, d_ls, vg = minibatch_loss_and_grads(
                agent, rollout.observations[idx], rollout.actions[idx], rollout.behavior_log_prob[idx],
                advantages[idx], returns[idx], log_ratio_clamp)
            norm_sum += clip_gradients([pg.flat, d_ls, vg.flat], cfg.max_grad_norm)
            adam_step(agent.policy_net, pg, agent.policy_opt)
            adam_update([agent.log_std], [d_ls], agent.log_std_opt)
            adam_step(agent.value_net, vg, agent.value_opt)
            for k in sums:
                sums[k] += stats[k]
            count += 1
    return PpoReport(sums["policy_loss"] / count, sums["value_loss"] / count, sums["approx_kl"] / count,
                     sums["clip_fraction"] / count, norm_sum / count, count)


def ppo_update(agent: PpoAgent, rollout: Rollout, advantages, returns, rng: np.random.Generator) -> PpoReport:
    """Standard clipped PPO epochs on the agent's own rollout."""
    return _run_epochs(agent, rollout, advantages, returns, rng, None)


def passive_ppo_update(agent: PpoAgent, rollout: Rollout, advantages, returns,
                       rng: np.random.Generator) -> PpoReport:
    """PPO epochs for a network that did not collect ``rollout``.

    The ratio is taken against the acting network's collection-time
    log-probabilities and its log is clamped to ``+-passive_log_ratio_clamp``.
    """
    return _run_epochs(agent, rollout, advantages, returns, rng, agent.config.passive_log_ratio_clamp)


def value_loss(agent: PpoAgent, rollout: Rollout, returns) -> float:
    err = state_values(agent, rollout.observations) - returns
    return 0.5 * float(np.mean(err * err))


def act_deterministic(agent: PpoAgent, normalized_obs) -> np.ndarray:
    return predict(agent.policy_net, normalized_obs)
