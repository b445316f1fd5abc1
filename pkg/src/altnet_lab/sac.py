"""Soft Actor-Critic on top of ``nn_core``.

The policy network emits ``(mean, log_std)`` per action dimension; actions are
``tanh(u) * scale + shift`` with ``u ~ N(mean, exp(log_std))``. Twin critics
take ``obs ++ action`` and are held as one two-member ensemble, so a single
batched matmul serves both; Adam and Polyak act elementwise, which makes the
joint buffer equivalent to two separately optimised critics. All gradients
are derived by hand below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .nn_core import (
    DenseNetwork,
    EnsembleNetwork,
    ForwardTrace,
    OptimizerState,
    adam_step,
    backward,
    copy_into,
    ensemble_backward,
    ensemble_forward,
    ensemble_predict,
    forward,
    init_network,
    init_optimizer,
    polyak_update,
    predict,
)
from .replay import Batch
from .seeding import derive_seed

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class SacConfig:
    hidden_width: int = 256
    hidden_layers: int = 2
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-8
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    init_temperature: float = 1.0
    target_entropy: float | None = None


@dataclass
class SacUpdateReport:
    critic_loss: float
    actor_loss: float
    temperature_loss: float
    alpha: float
    mean_q: float


@dataclass
class SacAgent:
    policy_net: DenseNetwork
    critics: EnsembleNetwork  # members: q1, q2
    critic_targets: EnsembleNetwork
    log_temperature: np.ndarray  # shape (1,), kept as an array for Adam
    target_entropy: float
    policy_opt: OptimizerState
    critic_opt: OptimizerState
    temperature_opt: OptimizerState
    action_scale: np.ndarray
    action_shift: np.ndarray
    config: SacConfig
    seed: int = 0
    updates: int = 0

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    @property
    def action_dim(self) -> int:
        return self.action_scale.shape[0]

    @property
    def observation_dim(self) -> int:
        return self.policy_net.input_dim

    # member snapshots; edits to these do not reach the agent
    @property
    def q1_net(self) -> DenseNetwork:
        return self.critics.member(0)

    @property
    def q2_net(self) -> DenseNetwork:
        return self.critics.member(1)

    @property
    def q1_target(self) -> DenseNetwork:
        return self.critic_targets.member(0)

    @property
    def q2_target(self) -> DenseNetwork:
        return self.critic_targets.member(1)

    def networks(self) -> dict:
        return {"policy": self.policy_net, "critics": self.critics, "critic_targets": self.critic_targets}

    def optimizers(self) -> list[OptimizerState]:
        return [self.policy_opt, self.critic_opt, self.temperature_opt]


def _layer_sizes(n_in: int, n_out: int, cfg: SacConfig) -> list[int]:
    return [n_in, *([cfg.hidden_width] * cfg.hidden_layers), n_out]


def make_sac_agent(observation_dim: int, action_low, action_high, seed: int,
                   config: SacConfig | None = None) -> SacAgent:
    cfg = config or SacConfig()
    low = np.asarray(action_low, dtype=np.float64).reshape(-1)
    high = np.asarray(action_high, dtype=np.float64).reshape(-1)
    act_dim = low.shape[0]
    policy = init_network(_layer_sizes(observation_dim, 2 * act_dim, cfg), derive_seed(seed, "policy"))
    critics = EnsembleNetwork([
        init_network(_layer_sizes(observation_dim + act_dim, 1, cfg), derive_seed(seed, name))
        for name in ("q1", "q2")])

    def opt(net):
        return init_optimizer(net, cfg.learning_rate, (0.9, 0.999), cfg.adam_epsilon)

    log_t = np.array([math.log(cfg.init_temperature)])
    target_entropy = -float(act_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
    return SacAgent(
        policy, critics, critics.copy(), log_t, target_entropy,
        opt(policy), opt(critics),
        init_optimizer([log_t], cfg.learning_rate, (0.9, 0.999), cfg.adam_epsilon),
        (high - low) / 2.0, (high + low) / 2.0, cfg, int(seed),
    )


def reset_sac_agent(agent: SacAgent, seed: int) -> SacAgent:
    """Full reset in place: networks, targets, temperature and every optimizer state."""
    fresh = make_sac_agent(agent.observation_dim, agent.action_shift - agent.action_scale,
                           agent.action_shift + agent.action_scale, seed, agent.config)
    for name, net in agent.networks().items():
        copy_into(net, fresh.networks()[name])
    agent.log_temperature[...] = fresh.log_temperature
    for opt in agent.optimizers():
        opt.zero()
    agent.seed = int(seed)
    agent.updates = 0
    return agent


def _split_head(out: np.ndarray, act_dim: int):
    mean = out[..., :act_dim]
    raw = out[..., act_dim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std, raw


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")


def policy_head(agent: SacAgent, observation: np.ndarray):
    """Return ``(mean, log_std)`` with log_std clamped."""
    out = predict(agent.policy_net, observation)
    _check_finite(out, "policy output")
    mean, log_std, _ = _split_head(out, agent.action_dim)
    return mean, log_std


def squash(agent: SacAgent, u: np.ndarray) -> np.ndarray:
    t = np.clip(np.tanh(u), -1.0 + 1e-12, 1.0 - 1e-12)
    return t * agent.action_scale + agent.action_shift


def sample_action(agent: SacAgent, observation, rng: np.random.Generator | None,
                  deterministic: bool = False) -> np.ndarray:
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape[-1] != agent.observation_dim:
        raise ShapeError(f"observation width {obs.shape[-1]} != {agent.observation_dim}")
    mean, log_std = policy_head(agent, obs)
    if deterministic:
        u = mean
    else:
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return squash(agent, u)


def _log_prob_terms(mean, log_std, u, agent: SacAgent):
    eps = (u - mean) / np.exp(log_std)
    t = np.tanh(u)
    one_m_t2 = 1.0 - t * t
    per_dim = (-0.5 * eps * eps - log_std - HALF_LOG_2PI
               - np.log(one_m_t2 + TANH_EPS) - np.log(agent.action_scale))
    return per_dim.sum(axis=-1), t, one_m_t2


def log_prob(agent: SacAgent, observation, pre_squash_sample) -> np.ndarray | float:
    """Log-density of the squashed, scaled action produced by ``pre_squash_sample``."""
    mean, log_std = policy_head(agent, observation)
    lp, _, _ = _log_prob_terms(mean, log_std, np.asarray(pre_squash_sample, dtype=np.float64), agent)
    return float(lp) if np.ndim(lp) == 0 else lp


def min_q(agent: SacAgent, observations, actions, target: bool = False) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(observations), np.atleast_2d(actions)], axis=1)
    q = ensemble_predict(agent.critic_targets if target else agent.critics, x)
    return q[:, :, 0].min(axis=0)


def td_target(agent: SacAgent, reward, next_obs, terminal, rng: np.random.Generator) -> np.ndarray:
    """Soft Bellman target with one fresh next-action sample per transition."""
    next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float64))
    reward = np.atleast_1d(np.asarray(reward, dtype=np.float64))
    terminal = np.atleast_1d(np.asarray(terminal, dtype=np.float64))
    mean, log_std = policy_head(agent, next_obs)
    return _soft_target(agent, reward, next_obs, terminal, mean, log_std, rng)


def _soft_target(agent, reward, next_obs, terminal, mean, log_std, rng):
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    lp, t, _ = _log_prob_terms(mean, log_std, u, agent)
    a_next = t * agent.action_scale + agent.action_shift
    soft_v = min_q(agent, next_obs, a_next, target=True) - agent.alpha * lp
    return reward + agent.gamma * (1.0 - terminal) * soft_v


def _rows(trace: ForwardTrace, start: int, stop: int) -> ForwardTrace:
    return ForwardTrace(trace.input[start:stop], [z[start:stop] for z in trace.pre],
                        [h[start:stop] for h in trace.post], True)


def sac_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> SacUpdateReport:
    """One critic step, one actor step, one temperature step, then Polyak targets."""
    n = len(batch)
    if n == 0:
        raise ShapeError("empty batch")
    A = agent.action_dim
    alpha = agent.alpha
    obs = batch.observations

    # one policy pass serves both the TD target (next states) and the actor (states);
    # the critic step does not touch the policy, so both see the same parameters
    ptr = forward(agent.policy_net, np.concatenate([batch.next_observations, obs]))
    _check_finite(ptr.post[-1], "policy output")
    mean_next, log_std_next, _ = _split_head(ptr.post[-1][:n], A)

    # critics
    y = _soft_target(agent, batch.rewards, batch.next_observations, batch.terminals,
                     mean_next, log_std_next, rng)
    sa = np.concatenate([obs, batch.actions], axis=1)
    tr = ensemble_forward(agent.critics, sa)
    q = tr.post[-1][:, :, 0]
    err = q - y
    critic_loss = 0.5 * float(np.vdot(err, err)) / n
    if not math.isfinite(critic_loss):
        raise NumericError(f"non-finite critic loss (mean |y|={np.nanmean(np.abs(y)):.3g}, "
                           f"mean q={np.nanmean(q):.3g}, alpha={alpha:.3g})")
    adam_step(agent.critics, ensemble_backward(agent.critics, tr, (err / n)[:, :, None]), agent.critic_opt)

    # actor, against the freshly updated critics
    eps = rng.standard_normal((n, A))
    actor_loss, policy_grads, lp = _actor_pass(agent, obs, eps, _rows(ptr, n, 2 * n))
    adam_step(agent.policy_net, policy_grads, agent.policy_opt)

    # temperature
    gap = lp + agent.target_entropy
    temperature_loss = float(-agent.log_temperature[0] * np.mean(gap))
    _temperature_step(agent, -float(np.mean(gap)))

    polyak_update(agent.critic_targets, agent.critics, agent.config.tau)
    agent.updates += 1
    return SacUpdateReport(critic_loss, actor_loss, temperature_loss, agent.alpha, float(q.mean()))


def _temperature_step(agent: SacAgent, grad: float) -> None:
    # scalar Adam; same arithmetic as adam_update on a one-element array
    if not math.isfinite(grad):
        raise NumericError("non-finite temperature gradient")
    st = agent.temperature_opt
    b1, b2 = st.moment_decays
    st.step_count += 1
    t = st.step_count
    m = b1 * st.first_moment[0][0] + (1.0 - b1) * grad
    v = b2 * st.second_moment[0][0] + (1.0 - b2) * grad * grad
    st.first_moment[0][0] = m
    st.second_moment[0][0] = v
    step_size = st.learning_rate / (1.0 - b1**t)
    agent.log_temperature[0] -= step_size * m / (math.sqrt(v) / math.sqrt(1.0 - b2**t) + st.epsilon)


def _actor_pass(agent: SacAgent, obs: np.ndarray, eps: np.ndarray, ptr: ForwardTrace | None = None):
    n, A = obs.shape[0], agent.action_dim
    alpha = agent.alpha
    if ptr is None:
        ptr = forward(agent.policy_net, obs)
    mean, log_std, raw = _split_head(ptr.post[-1], A)
    std = np.exp(log_std)
    u = mean + std * eps
    lp, t, one_m_t2 = _log_prob_terms(mean, log_std, u, agent)
    a = t * agent.action_scale + agent.action_shift
    sa_pi = np.concatenate([obs, a], axis=1)
    ctr = ensemble_forward(agent.critics, sa_pi)
    qa1, qa2 = ctr.post[-1][0, :, 0], ctr.post[-1][1, :, 0]
    use1 = qa1 <= qa2
    loss = float(np.mean(alpha * lp - np.where(use1, qa1, qa2)))
    if not math.isfinite(loss):
        raise NumericError(f"non-finite actor loss (alpha={alpha:.3g}, mean log_prob={np.nanmean(lp):.3g})")
    # critics are frozen here: only d(min Q)/d(action) is needed
    g = ensemble_backward(agent.critics, ctr, np.ones((2, n, 1)), param_grads=False).input[:, :, -A:]
    dq_da = np.where(use1[:, None], g[0], g[1])
    d_lp = alpha / n
    d_u = d_lp * 2.0 * t * one_m_t2 / (one_m_t2 + TANH_EPS) - (dq_da / n) * agent.action_scale * one_m_t2
    d_logstd = (-d_lp + d_u * std * eps) * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    grads = backward(agent.policy_net, ptr, np.concatenate([d_u, d_logstd], axis=1))
    return loss, grads, lp


def actor_loss_and_grad(agent: SacAgent, obs: np.ndarray, eps: np.ndarray):
    """Actor objective and its policy-parameter gradient for fixed noise ``eps``."""
    loss, grads, _ = _actor_pass(agent, np.atleast_2d(obs), eps)
    return loss, grads
