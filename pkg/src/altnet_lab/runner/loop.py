"""Per-seed training loops for SAC and PPO, evaluation and plasticity probes.

Sub-seeds all come from the seed via ``derive_seed(seed, label, ...)``:
``"env"``/``"episode"`` for training episodes, ``("agent", i)`` for the
initial networks, ``("update", i)`` for batch sampling, ``"reset"`` for the
reset stream, ``"act"`` for exploration noise, ``"probe"`` for probe batches
and ``("eval", k)`` for the k-th evaluation's episode seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..envs import evaluation_copy, make_env
from ..errors import NumericError
from ..nn_core import EnsembleNetwork
from ..plasticity import probe_metrics
from ..ppo import (
    EnvCursor,
    Normalizer,
    PpoAgent,
    PpoConfig,
    act_deterministic,
    collect_rollout,
    make_ppo_agent,
    passive_ppo_update,
    ppo_update,
    reset_ppo_agent,
    rollout_gae,
)
from ..replay import ReplayBuffer
from ..sac import SacAgent, SacConfig, make_sac_agent, reset_sac_agent, sample_action
from ..seeding import SeedStream, derive_seed, rng_for
from ..strategies import Controller, OffPolicyLoop, apply_ablation, rde_select_action, run_off_policy_step
from .config import ExperimentConfig, ablation_spec, reset_period, schedule_from_config
from .outputs import CsvLog, DetailLog


@dataclass
class SeedResult:
    seed: int
    csv_path: str
    detail_path: str
    status: str = "ok"
    error: str | None = None
    wall_clock_s: float = 0.0
    gradient_updates: int = 0
    reset_seeds: list = field(default_factory=list)


# ---------------------------------------------------------------- evaluation

def as_policy(actor, normalizer: Normalizer | None = None, rng: np.random.Generator | None = None) -> Callable:
    """Deterministic obs -> action function for an agent, a controller or a callable."""
    if isinstance(actor, Controller):
        if actor.strategy == "rde":
            return lambda obs: rde_select_action(obs, actor.agents, actor, rng, deterministic=True)[0]
        return as_policy(actor.active_agent, normalizer, rng)
    if isinstance(actor, SacAgent):
        return lambda obs: sample_action(actor, obs, None, deterministic=True)
    if isinstance(actor, PpoAgent):
        if normalizer is None:
            return lambda obs: act_deterministic(actor, obs)
        return lambda obs: act_deterministic(actor, normalizer.observation(obs, update=False))
    if callable(actor):
        return actor
    raise TypeError(f"cannot evaluate {type(actor).__name__}")


def evaluate_policy(actor, env, episodes: int, seed: int, normalizer: Normalizer | None = None) -> float:
    """Mean undiscounted return of deterministic episodes on a separate env instance.

    Episode ``j`` starts from the ``j``-th seed of ``SeedStream(seed)``, so the
    first episode does not depend on ``episodes``. Nothing about training state
    is touched: the env is a fresh copy and no buffer is written.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    policy = as_policy(actor, normalizer, np.random.default_rng(derive_seed(seed, "vote")))
    eval_env = evaluation_copy(env)
    seeds = SeedStream(seed)
    low, high = eval_env.spec.action_low, eval_env.spec.action_high
    total = 0.0
    for _ in range(episodes):
        obs = eval_env.reset(seeds.next())
        while True:
            res = eval_env.step(np.clip(policy(obs), low, high))
            total += res.reward
            obs = res.observation
            if res.terminal or res.truncated:
                break
    return total / episodes


# ---------------------------------------------------------------- probes

def _net_metrics(net, inputs: np.ndarray, env_step: int, tag: str) -> dict[str, Any]:
    if isinstance(net, EnsembleNetwork):
        net = net.member(0)
    m = probe_metrics(net, inputs, env_step, tag)
    return {"avg_weight_norm": m.avg_weight_norm, "dormant_fraction": m.dormant_fraction,
            "stable_rank_per_layer": m.stable_rank_per_layer}


class Prober:
    """Measures tagged agents on probe batches and writes CSV and detail rows."""

    def __init__(self, log: CsvLog, detail: DetailLog, probe_size: int, seed: int, sample_fn: Callable):
        self.log = log
        self.detail = detail
        self.probe_size = probe_size
        self.rng = rng_for(seed, "probe")
        self.sample_fn = sample_fn  # (n, rng) -> (policy_inputs, critic_inputs)
        self.pending: dict[int, tuple] = {}
        # every probe: (env_step, agent index, role, policy metrics); used by the acceptance suite
        self.records: list[dict[str, Any]] = []

    def batch(self):
        return self.sample_fn(self.probe_size, self.rng)

    def measure(self, agent, index: int, role: str, env_step: int, event: str = "", inputs=None) -> None:
        if inputs is None:
            inputs = self.batch()
        pol_in, crit_in = inputs
        tag = f"agent{index}/{role}"
        m = probe_metrics(agent.policy_net, pol_in, env_step, tag)
        self.log.write(env_step, None, m, tag, event)
        second = agent.critics if isinstance(agent, SacAgent) else agent.value_net
        self.detail.write({
            "env_step": int(env_step), "agent_tag": tag, "event": event,
            "policy": {"avg_weight_norm": m.avg_weight_norm, "dormant_fraction": m.dormant_fraction,
                       "stable_rank_per_layer": m.stable_rank_per_layer},
            "critic" if isinstance(agent, SacAgent) else "value": _net_metrics(second, crit_in, env_step, tag),
        })
        self.records.append({"env_step": int(env_step), "index": index, "role": role, "event": event,
                             "avg_weight_norm": m.avg_weight_norm, "dormant_fraction": m.dormant_fraction,
                             "stable_rank": m.stable_rank, "probe": pol_in})

    def install(self, controller: Controller) -> None:
        """Hook pre/post-reset measurements into the controller."""
        kind = "swap" if controller.strategy == "altnet" else "reset"

        def before(ctrl, index, env_step):
            inputs = self.batch()
            self.pending[index] = inputs
            self.measure(ctrl.agents[index], index, "pre_reset", env_step, "", inputs)

        def after(ctrl, index, env_step):
            inputs = self.pending.pop(index)
            self.measure(ctrl.agents[index], index, "post_reset", env_step, kind, inputs)

        controller.before_reset = before
        controller.after_reset = after

    def scheduled(self, controller: Controller, env_step: int) -> None:
        inputs = self.batch()
        for i, agent in enumerate(controller.agents):
            role = "active" if i == controller.active_index or controller.strategy == "rde" else "passive"
            self.measure(agent, i, role, env_step, "", inputs)


def _eval_tag(controller: Controller) -> str:
    return "ensemble" if controller.strategy == "rde" else f"agent{controller.active_index}"


# ---------------------------------------------------------------- SAC

def run_sac_seed(cfg: ExperimentConfig, seed: int, csv_path: Path, detail_path: Path,
                 keep: dict | None = None) -> SeedResult:
    start = time.perf_counter()
    result = SeedResult(seed, str(csv_path), str(detail_path))
    env = make_env(cfg.env, cfg.env_overrides, schedule_from_config(cfg), cfg.max_episode_steps)
    spec = env.spec
    plan = apply_ablation(ablation_spec(cfg, spec.observation_dim, spec.action_dim))
    sac_cfg = SacConfig(hidden_width=plan.width, hidden_layers=cfg.hidden_layers, batch_size=cfg.batch_size)
    agents = [make_sac_agent(spec.observation_dim, spec.action_low, spec.action_high,
                             derive_seed(seed, "agent", i), sac_cfg) for i in range(plan.n_networks)]
    controller = Controller(cfg.strategy, agents, plan.env_step_period, reset_sac_agent, seed, plan.halt_after)
    buffer = ReplayBuffer(plan.buffer_capacity, spec.observation_dim, spec.action_dim)
    loop = OffPolicyLoop(env, seed, plan.n_networks, cfg.warmup_steps, cfg.batch_size)
    reset_env = make_env(cfg.env, cfg.env_overrides, schedule_from_config(cfg), cfg.max_episode_steps)
    reset_seeds = SeedStream(seed, "probe-reset")

    def sample(n, rng):
        if len(buffer) == 0:
            obs = np.stack([reset_env.reset(reset_seeds.next()) for _ in range(n)])
            acts = rng.uniform(spec.action_low, spec.action_high, size=(n, spec.action_dim))
        else:
            b = buffer.sample(n, rng)
            obs, acts = b.observations, b.actions
        return obs, np.concatenate([obs, acts], axis=1)

    log = CsvLog(csv_path)
    detail = DetailLog(detail_path)
    prober = Prober(log, detail, cfg.probe_size, seed, sample)
    prober.install(controller)
    if keep is not None:
        keep.update(controller=controller, buffer=buffer, prober=prober)
    n_eval = 0

    def evaluate(step):
        nonlocal n_eval
        ret = evaluate_policy(controller, env, cfg.eval_episodes, derive_seed(seed, "eval", n_eval))
        n_eval += 1
        log.write(step, ret, None, _eval_tag(controller), "")

    try:
        if cfg.total_env_steps > 0:
            evaluate(0)
        for t in range(1, cfg.total_env_steps + 1):
            step = run_off_policy_step(controller, loop, buffer, cfg.replay_ratio)
            for ev in step.events:
                if ev.kind == "halt":
                    log.write(t, None, None, f"agent{ev.active_index}", "halt")
            if plan.buffer_shrink_at == t:
                buffer.shrink_capacity(plan.buffer_shrink_to)
                log.write(t, None, None, "buffer", "buffer_shrink")
            if t % cfg.metrics_interval == 0:
                prober.scheduled(controller, t)
            if t % cfg.eval_interval == 0:
                evaluate(t)
    except NumericError as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
    finally:
        log.close()
        detail.close()
    result.gradient_updates = loop.updates
    result.reset_seeds = [ev.seed for ev in controller.events if ev.seed is not None]
    result.wall_clock_s = time.perf_counter() - start
    return result


# ---------------------------------------------------------------- PPO

def run_ppo_seed(cfg: ExperimentConfig, seed: int, csv_path: Path, detail_path: Path,
                 keep: dict | None = None) -> SeedResult:
    start = time.perf_counter()
    result = SeedResult(seed, str(csv_path), str(detail_path))
    env = make_env(cfg.env, cfg.env_overrides, schedule_from_config(cfg), cfg.max_episode_steps)
    spec = env.spec
    hidden = tuple([cfg.hidden_width] * cfg.hidden_layers)
    ppo_cfg = PpoConfig(hidden_sizes=hidden, rollout_length=cfg.rollout_length)
    n = cfg.n_networks
    agents = [make_ppo_agent(spec.observation_dim, spec.action_dim, derive_seed(seed, "agent", i), ppo_cfg)
              for i in range(n)]
    controller = Controller(cfg.strategy, agents, reset_period(cfg), reset_ppo_agent, seed, cfg.halt_resets_after)
    normalizer = Normalizer(spec.observation_dim, ppo_cfg.gamma, ppo_cfg.normalize_observations,
                            ppo_cfg.normalize_rewards)
    cursor = EnvCursor(env, SeedStream(seed, "episode"), normalizer)
    act_rng = rng_for(seed, "act")
    update_rngs = [rng_for(seed, "update", i) for i in range(n)]
    latest: dict[str, np.ndarray] = {"obs": cursor.obs[None, :]}

    def sample(k, rng):
        obs = latest["obs"]
        idx = rng.integers(0, len(obs), size=k)
        return obs[idx], obs[idx]

    log = CsvLog(csv_path)
    detail = DetailLog(detail_path)
    prober = Prober(log, detail, cfg.probe_size, seed, sample)
    prober.install(controller)
    if keep is not None:
        keep.update(controller=controller, prober=prober, cursor=cursor)
    n_eval = 0

    def evaluate(step):
        nonlocal n_eval
        ret = evaluate_policy(controller.active_agent, env, cfg.eval_episodes,
                              derive_seed(seed, "eval", n_eval), normalizer)
        n_eval += 1
        log.write(step, ret, None, _eval_tag(controller), "")

    steps = 0
    try:
        if cfg.total_env_steps > 0:
            evaluate(0)
        while steps < cfg.total_env_steps:
            length = min(cfg.rollout_length, cfg.total_env_steps - steps)
            rollout = collect_rollout(controller.active_agent, cursor, length, act_rng)
            latest["obs"] = rollout.observations
            active = controller.active_index
            for i in controller.trainable_indices():
                adv, ret = rollout_gae(agents[i], rollout)
                update = ppo_update if i == active else passive_ppo_update
                result.gradient_updates += update(agents[i], rollout, adv, ret, update_rngs[i]).minibatches
            before = steps
            steps += length
            for ev in controller.tick(steps):
                if ev.kind == "halt":
                    log.write(steps, None, None, f"agent{ev.active_index}", "halt")
            if steps // cfg.metrics_interval > before // cfg.metrics_interval:
                prober.scheduled(controller, steps)
            if steps // cfg.eval_interval > before // cfg.eval_interval:
                evaluate(steps)
    except NumericError as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
    finally:
        log.close()
        detail.close()
    result.reset_seeds = [ev.seed for ev in controller.events if ev.seed is not None]
    result.wall_clock_s = time.perf_counter() - start
    return result


def run_seed(cfg: ExperimentConfig, seed: int, csv_path: Path, detail_path: Path,
             keep: dict | None = None) -> SeedResult:
    fn = run_sac_seed if cfg.algorithm == "sac" else run_ppo_seed
    return fn(cfg, seed, Path(csv_path), Path(detail_path), keep)
