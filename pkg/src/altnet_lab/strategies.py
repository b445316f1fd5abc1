"""Reset strategies: Baseline, Standard Resets, RDE and AltNet.

The controller owns the agents, the reset schedule and the seed stream for
resets. It never touches the replay buffer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .nn_core import network_param_count
from .replay import ReplayBuffer
from .sac import SacAgent, min_q, sac_update, sample_action
from .seeding import SeedStream, derive_seed

STRATEGIES = ("baseline", "standard_reset", "rde", "altnet")
RDE_BETA = 50.0


def reset_freq_env_steps(update_budget: int, replay_ratio: int, n_networks: int) -> int:
    """Reset period in environment steps: ``U / (RR * N)``, exact division only."""
    for name, v in (("U", update_budget), ("RR", replay_ratio), ("N", n_networks)):
        if int(v) != v or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v}")
    denom = int(replay_ratio) * int(n_networks)
    if int(update_budget) % denom:
        raise ConfigError(
            f"reset period U/(RR*N) = {update_budget}/({replay_ratio}*{n_networks}) is not an integer: "
            f"{update_budget} is not divisible by {denom}")
    return int(update_budget) // denom


@dataclass
class ResetSchedule:
    update_budget: int
    replay_ratio: int
    n_networks: int
    halt_after: int | None = None

    @property
    def env_step_period(self) -> int:
        return reset_freq_env_steps(self.update_budget, self.replay_ratio, self.n_networks)


@dataclass
class ResetEvent:
    env_step: int
    kind: str  # "reset" | "swap" | "halt"
    agent_index: int
    seed: int | None = None
    active_index: int = 0


class Controller:
    """Strategy state: agents, active index, reset bookkeeping.

    ``reset_agent(agent, seed)`` performs a full in-place reset. Optional
    ``before_reset`` / ``after_reset`` callbacks receive
    ``(controller, agent_index, env_step)`` and are used for measurements.
    """

    def __init__(self, strategy: str, agents: Sequence, env_step_period: int | None,
                 reset_agent: Callable, master_seed: int, halt_after: int | None = None,
                 beta: float = RDE_BETA):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
        agents = list(agents)
        if strategy == "baseline" and len(agents) != 1:
            raise ConfigError("baseline uses exactly one network")
        if strategy == "standard_reset" and len(agents) != 1:
            raise ConfigError("standard_reset uses exactly one network")
        if strategy == "rde" and len(agents) != 2:
            raise ConfigError("rde uses exactly two networks")
        if strategy == "altnet" and len(agents) < 2:
            raise ConfigError("altnet needs at least two networks")
        if strategy != "baseline" and (env_step_period is None or env_step_period <= 0):
            raise ConfigError(f"{strategy} needs a positive reset period")
        self.strategy = strategy
        self.agents = agents
        self.N = len(agents)
        self.env_step_period = env_step_period
        self.reset_agent = reset_agent
        self.halt_after = halt_after
        self.beta = float(beta)
        self.active_index = 0
        self.env_steps = 0
        self.resets_performed = 0
        self.reset_seeds = SeedStream(master_seed, "reset")
        self.last_reset_step = [0] * self.N
        self.rde_next = 0
        self.events: list[ResetEvent] = []
        self.halted = False
        self.before_reset: Callable | None = None
        self.after_reset: Callable | None = None

    @property
    def active_agent(self):
        return self.agents[self.active_index]

    def trainable_indices(self) -> list[int]:
        if self.strategy in ("baseline", "standard_reset"):
            return [0]
        if self.strategy == "altnet" and self.halted:
            # with resets halted the non-acting networks no longer matter
            return [self.active_index]
        return list(range(self.N))

    def oldest_index(self) -> int:
        """Agent with the longest time since reset; ties go to the lower index."""
        return int(np.argmin(self.last_reset_step))

    def _reset_due(self, env_step: int) -> bool:
        if self.strategy == "baseline" or env_step <= 0 or env_step % self.env_step_period:
            return False
        return self.halt_after is None or env_step <= self.halt_after

    def _full_reset(self, index: int, env_step: int) -> int:
        if self.before_reset is not None:
            self.before_reset(self, index, env_step)
        seed = self.reset_seeds.next()
        self.reset_agent(self.agents[index], seed)
        self.last_reset_step[index] = env_step
        self.resets_performed += 1
        return seed

    def _notify_after(self, index: int, env_step: int) -> None:
        if self.after_reset is not None:
            self.after_reset(self, index, env_step)

    def tick(self, env_step: int) -> list[ResetEvent]:
        """Advance the schedule to ``env_step``; returns the events it triggered."""
        if env_step <= self.env_steps and env_step != 0:
            raise ConfigError(f"env_step must increase strictly ({self.env_steps} -> {env_step})")
        self.env_steps = env_step
        out: list[ResetEvent] = []
        if self._reset_due(env_step):
            if self.strategy == "altnet":
                out.append(self._altnet_swap(env_step))
            elif self.strategy == "standard_reset":
                seed = self._full_reset(0, env_step)
                out.append(ResetEvent(env_step, "reset", 0, seed, 0))
                self._notify_after(0, env_step)
            elif self.strategy == "rde":
                i = self.rde_next
                seed = self._full_reset(i, env_step)
                self.rde_next = (i + 1) % self.N
                out.append(ResetEvent(env_step, "reset", i, seed, self.active_index))
                self._notify_after(i, env_step)
        if (self.halt_after is not None and not self.halted and self.strategy != "baseline"
                and env_step >= self.halt_after):
            self.halted = True
            out.append(ResetEvent(env_step, "halt", self.active_index, None, self.active_index))
        self.events.extend(out)
        return out

    def _altnet_swap(self, env_step: int) -> ResetEvent:
        old = self.active_index
        seed = self._full_reset(old, env_step)
        self.active_index = (old + 1) % self.N
        self._notify_after(old, env_step)
        return ResetEvent(env_step, "swap", old, seed, self.active_index)


def altnet_tick(controller: Controller, env_step: int) -> ResetEvent | None:
    if controller.strategy != "altnet":
        raise ConfigError("altnet_tick needs an AltNet controller")
    events = [e for e in controller.tick(env_step) if e.kind == "swap"]
    return events[0] if events else None


def standard_reset_tick(controller: Controller, env_step: int) -> ResetEvent | None:
    if controller.strategy != "standard_reset":
        raise ConfigError("standard_reset_tick needs a Standard Resets controller")
    events = [e for e in controller.tick(env_step) if e.kind == "reset"]
    return events[0] if events else None


def rde_probabilities(q_values: np.ndarray, beta: float) -> np.ndarray:
    """Softmax of ``beta * Q`` over candidate actions."""
    z = beta * np.asarray(q_values, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def rde_select_action(observation, agents: Sequence[SacAgent], controller: Controller,
                      rng: np.random.Generator, deterministic: bool = False):
    """Each agent proposes an action; the oldest agent's critic votes.

    In deterministic (evaluation) mode the proposals are the policy means and
    the highest-scoring one is taken instead of sampling the softmax.
    Returns ``(action, chosen_index, probabilities)``.
    """
    obs = np.asarray(observation, dtype=np.float64)
    proposals = np.stack([sample_action(a, obs, rng, deterministic) for a in agents])
    judge = agents[controller.oldest_index()]
    q = min_q(judge, np.repeat(obs[None, :], len(agents), axis=0), proposals)
    p = rde_probabilities(q, controller.beta)
    choice = int(np.argmax(p)) if deterministic else int(rng.choice(len(agents), p=p))
    return proposals[choice], choice, p


def acting_action(controller: Controller, observation, rng: np.random.Generator,
                  deterministic: bool = False) -> np.ndarray:
    if controller.strategy == "rde":
        return rde_select_action(observation, controller.agents, controller, rng, deterministic)[0]
    return sample_action(controller.active_agent, observation, rng, deterministic)


@dataclass
class StepLog:
    env_step: int
    reward: float
    episode_over: bool
    episode_return: float | None
    updates: int
    events: list[ResetEvent] = field(default_factory=list)


class OffPolicyLoop:
    """Environment cursor plus the randomness for acting and batch sampling."""

    def __init__(self, env, master_seed: int, n_agents: int, warmup_steps: int = 5000,
                 batch_size: int = 256):
        self.env = env
        self.episode_seeds = SeedStream(master_seed, "episode")
        self.act_rng = np.random.default_rng(derive_seed(master_seed, "act"))
        self.update_rngs = [np.random.default_rng(derive_seed(master_seed, "update", i)) for i in range(n_agents)]
        self.warmup_steps = int(warmup_steps)
        self.batch_size = int(batch_size)
        self.obs = env.reset(self.episode_seeds.next())
        self.episode_return = 0.0
        self.episodes = 0
        self.updates = 0


def run_off_policy_step(controller: Controller, loop: OffPolicyLoop, buffer: ReplayBuffer,
                        replay_ratio: int) -> StepLog:
    """One interaction, RR updates per trainable agent, then the strategy tick."""
    env = loop.env
    spec = env.spec
    done_before = controller.env_steps
    if done_before < loop.warmup_steps:
        action = loop.act_rng.uniform(spec.action_low, spec.action_high)
    else:
        action = acting_action(controller, loop.obs, loop.act_rng)
    res = env.step(action)
    buffer.add(loop.obs, np.clip(action, spec.action_low, spec.action_high), res.reward,
               res.observation, res.terminal)
    loop.episode_return += res.reward
    over = res.terminal or res.truncated
    finished = None
    if over:
        finished = loop.episode_return
        loop.episode_return = 0.0
        loop.episodes += 1
        loop.obs = env.reset(loop.episode_seeds.next())
    else:
        loop.obs = res.observation
    env_step = done_before + 1
    n_updates = 0
    if env_step > loop.warmup_steps:
        for i in controller.trainable_indices():
            rng = loop.update_rngs[i]
            agent = controller.agents[i]
            for _ in range(replay_ratio):
                sac_update(agent, buffer.sample(loop.batch_size, rng), rng)
                n_updates += 1
    loop.updates += n_updates
    events = controller.tick(env_step)
    return StepLog(env_step, res.reward, over, finished, n_updates, events)


# ---------------------------------------------------------------- ablations

def sac_trainable_params(obs_dim: int, act_dim: int, width: int, hidden_layers: int = 2) -> int:
    hidden = [width] * hidden_layers
    policy = network_param_count([obs_dim, *hidden, 2 * act_dim])
    critic = network_param_count([obs_dim + act_dim, *hidden, 1])
    return policy + 2 * critic + 1  # + log temperature


def ppo_trainable_params(obs_dim: int, act_dim: int, width: int, hidden_layers: int = 2) -> int:
    hidden = [width] * hidden_layers
    return (network_param_count([obs_dim, *hidden, act_dim]) + act_dim
            + network_param_count([obs_dim, *hidden, 1]))


def matched_width(base_width: int, n_networks: int, obs_dim: int, act_dim: int,
                  hidden_layers: int = 2, algorithm: str = "sac", tolerance: float = 0.02) -> int:
    """Hidden width at which ``n_networks`` agents hold about as many parameters as one base agent."""
    count = sac_trainable_params if algorithm == "sac" else ppo_trainable_params
    target = count(obs_dim, act_dim, base_width, hidden_layers)
    scored = sorted(
        (abs(n_networks * count(obs_dim, act_dim, w, hidden_layers) - target) / target, w)
        for w in range(1, base_width + 1))
    best_err, best = scored[0]
    if best_err > tolerance:
        near = ", ".join(f"{w} ({100 * e:.1f}%)" for e, w in scored[:3])
        raise ConfigError(f"no width matches {target} parameters within {100 * tolerance:.0f}% "
                          f"for N={n_networks}; nearest: {near}")
    return best


@dataclass
class AblationSpec:
    strategy: str = "altnet"
    n_networks: int = 2
    replay_ratio: int = 1
    update_budget: int = 200_000
    base_width: int = 256
    hidden_layers: int = 2
    parameter_matched: bool = False
    halt_resets_after: int | None = None
    buffer_capacity: int = 200_000
    buffer_shrink_at: int | None = None
    buffer_shrink_to: int | None = None
    obs_dim: int = 3
    act_dim: int = 1
    algorithm: str = "sac"


@dataclass
class AblationPlan:
    width: int
    n_networks: int
    env_step_period: int | None
    halt_after: int | None
    buffer_capacity: int
    buffer_shrink_at: int | None
    buffer_shrink_to: int | None


def apply_ablation(spec: AblationSpec) -> AblationPlan:
    """Resolve the ablation switches into concrete sizes and schedule values."""
    if spec.strategy == "altnet" and spec.n_networks not in (2, 4):
        raise ConfigError(f"AltNet supports N in {{2, 4}}, got {spec.n_networks}")
    width = spec.base_width
    if spec.parameter_matched:
        if spec.n_networks < 2:
            raise ConfigError("parameter matching only applies to multi-network strategies")
        width = matched_width(spec.base_width, spec.n_networks, spec.obs_dim, spec.act_dim,
                              spec.hidden_layers, spec.algorithm)
    period = None
    if spec.strategy != "baseline":
        period = reset_freq_env_steps(spec.update_budget, spec.replay_ratio, spec.n_networks)
    shrink_to = spec.buffer_shrink_to
    if spec.buffer_shrink_at is not None:
        if shrink_to is None or shrink_to <= 0:
            raise ConfigError("buffer_shrink_at needs a positive buffer_shrink_to")
    return AblationPlan(width, spec.n_networks, period, spec.halt_resets_after,
                        spec.buffer_capacity, spec.buffer_shrink_at, shrink_to)
