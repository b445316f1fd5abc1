"""Experiment configuration: a strict JSON document."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..envs import ENV_NAMES, make_env
from ..strategies import STRATEGIES, AblationSpec, apply_ablation, reset_freq_env_steps

ALGORITHMS = ("sac", "ppo")


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    env_overrides: dict = field(default_factory=dict)
    nonstationary_schedule: list | None = None  # [[step, {param: value}], ...]; None = env default
    max_episode_steps: int = 200
    algorithm: str = "sac"
    strategy: str = "baseline"
    n_networks: int = 1
    replay_ratio: int = 1
    update_budget: int = 200_000
    reset_period_env_steps: int | None = None  # PPO only; SAC derives the period from U, RR, N
    total_env_steps: int | None = None  # None: 150k for SAC, 300k for PPO
    halt_resets_after: int | None = None
    buffer_capacity: int = 200_000
    buffer_shrink_at: int | None = None
    buffer_shrink_to: int | None = None
    parameter_matched: bool = False
    hidden_width: int = 256
    hidden_layers: int = 2
    batch_size: int = 256
    warmup_steps: int = 5000
    seeds: list = field(default_factory=lambda: [0])
    eval_interval: int = 2500
    eval_episodes: int = 5
    metrics_interval: int = 5000
    probe_size: int = 512
    rollout_length: int = 2048
    output_dir: str = "runs"
    name: str | None = None

    def __post_init__(self):
        if self.total_env_steps is None:
            self.total_env_steps = 150_000 if self.algorithm == "sac" else 300_000
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        self.seeds = list(self.seeds)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = [self.algorithm, self.strategy, self.env, f"rr{self.replay_ratio}"]
        if self.strategy == "altnet" and self.n_networks != 2:
            parts.append(f"n{self.n_networks}")
        if self.parameter_matched:
            parts.append("pm")
        if self.buffer_shrink_at is not None:
            parts.append(f"shrink{self.buffer_shrink_at}")
        if self.halt_resets_after is not None:
            parts.append(f"halt{self.halt_resets_after}")
        return "-".join(parts)


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def _positive_int(name: str, v, allow_zero: bool = False) -> None:
    if isinstance(v, bool) or not isinstance(v, int) or v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{name} must be a {'non-negative' if allow_zero else 'positive'} integer, got {v!r}")


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def reset_period(cfg: ExperimentConfig) -> int | None:
    """Env steps between resets, or ``None`` for the baseline."""
    if cfg.strategy == "baseline":
        return None
    if cfg.algorithm == "ppo":
        return cfg.reset_period_env_steps
    return reset_freq_env_steps(cfg.update_budget, cfg.replay_ratio, cfg.n_networks)


def ablation_spec(cfg: ExperimentConfig, obs_dim: int, act_dim: int) -> AblationSpec:
    return AblationSpec(
        strategy=cfg.strategy, n_networks=cfg.n_networks, replay_ratio=cfg.replay_ratio,
        update_budget=cfg.update_budget, base_width=cfg.hidden_width, hidden_layers=cfg.hidden_layers,
        parameter_matched=cfg.parameter_matched, halt_resets_after=cfg.halt_resets_after,
        buffer_capacity=cfg.buffer_capacity, buffer_shrink_at=cfg.buffer_shrink_at,
        buffer_shrink_to=cfg.buffer_shrink_to, obs_dim=obs_dim, act_dim=act_dim, algorithm=cfg.algorithm)


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise ``ConfigError`` on any violated constraint; never runs anything."""
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {cfg.algorithm!r}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {cfg.strategy!r}")
    if cfg.env not in ENV_NAMES:
        raise ConfigError(f"env must be one of {ENV_NAMES}, got {cfg.env!r}")
    for name in ("replay_ratio", "update_budget", "n_networks", "buffer_capacity", "hidden_width",
                 "hidden_layers", "batch_size", "eval_interval", "eval_episodes", "metrics_interval",
                 "probe_size", "rollout_length", "max_episode_steps"):
        _positive_int(name, getattr(cfg, name))
    _positive_int("total_env_steps", cfg.total_env_steps, allow_zero=True)
    _positive_int("warmup_steps", cfg.warmup_steps, allow_zero=True)
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    for s in cfg.seeds:
        if isinstance(s, bool) or not isinstance(s, int):
            raise ConfigError(f"seeds must be integers, got {s!r}")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if not isinstance(cfg.parameter_matched, bool):
        raise ConfigError("parameter_matched must be true or false")

    if cfg.strategy == "rde" and cfg.algorithm != "sac":
        raise ConfigError("rde needs algorithm=sac: its action voting uses an action-value critic")
    if cfg.strategy in ("baseline", "standard_reset") and cfg.n_networks != 1:
        raise ConfigError(f"{cfg.strategy} uses exactly one network (n_networks=1), got {cfg.n_networks}")
    if cfg.strategy == "rde" and cfg.n_networks != 2:
        raise ConfigError(f"rde uses two networks, got n_networks={cfg.n_networks}")
    if cfg.strategy == "altnet" and cfg.n_networks not in (2, 4):
        raise ConfigError(f"altnet supports n_networks 2 or 4, got {cfg.n_networks}")
    if cfg.algorithm == "ppo":
        if cfg.replay_ratio != 1:
            raise ConfigError("replay_ratio applies to sac only; leave it at 1 for ppo")
        if cfg.buffer_shrink_at is not None:
            raise ConfigError("ppo keeps no replay buffer; buffer_shrink_at is sac only")
        if cfg.parameter_matched:
            raise ConfigError("parameter_matched is implemented for sac only")
        if cfg.strategy != "baseline":
            p = cfg.reset_period_env_steps
            if p is None:
                raise ConfigError("ppo reset strategies need reset_period_env_steps")
            _positive_int("reset_period_env_steps", p)
            if p % cfg.rollout_length:
                raise ConfigError(f"reset_period_env_steps={p} must be a multiple of rollout_length="
                                  f"{cfg.rollout_length} (resets happen between rollouts)")
        if cfg.rollout_length % 32:
            raise ConfigError("rollout_length must split into 32 equal minibatches")
    elif cfg.reset_period_env_steps is not None:
        raise ConfigError("reset_period_env_steps is for ppo; sac derives the period as U/(RR*N)")

    if cfg.buffer_shrink_to is not None and cfg.buffer_shrink_at is None:
        raise ConfigError("buffer_shrink_to needs buffer_shrink_at")
    if cfg.buffer_shrink_at is not None:
        _positive_int("buffer_shrink_at", cfg.buffer_shrink_at)
        if cfg.buffer_shrink_to is None:
            raise ConfigError("buffer_shrink_at needs buffer_shrink_to")
        _positive_int("buffer_shrink_to", cfg.buffer_shrink_to)
    if cfg.halt_resets_after is not None:
        _positive_int("halt_resets_after", cfg.halt_resets_after)
        if cfg.strategy == "baseline":
            raise ConfigError("halt_resets_after has no effect on the baseline")

    # period divisibility, width matching and env construction all raise ConfigError
    reset_period(cfg)
    env = make_env(cfg.env, cfg.env_overrides, schedule_from_config(cfg), cfg.max_episode_steps)
    spec = env.spec
    if cfg.algorithm == "sac":
        apply_ablation(ablation_spec(cfg, spec.observation_dim, spec.action_dim))


def schedule_from_config(cfg: ExperimentConfig):
    if cfg.nonstationary_schedule is None:
        return None
    out = []
    for entry in cfg.nonstationary_schedule:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2 or not isinstance(entry[1], dict):
            raise ConfigError(f"schedule entries are [step, {{param: value}}], got {entry!r}")
        out.append((int(entry[0]), dict(entry[1])))
    return out


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    """Git-style blob hash of the canonical config JSON."""
    body = canonical_json(cfg.to_dict()).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def expand_sweep(cfg: ExperimentConfig, data: dict[str, Any]) -> list[ExperimentConfig]:
    """Cartesian product over ``strategies`` x ``replay_ratios`` x seeds.

    ``data`` is the raw sweep document: a normal config plus optional
    ``strategies`` and ``replay_ratios`` lists. Each point runs all seeds.
    """
    strategies = data.get("strategies", [cfg.strategy])
    ratios = data.get("replay_ratios", [cfg.replay_ratio])
    out = []
    for strategy in strategies:
        for rr in ratios:
            d = cfg.to_dict()
            d["strategy"] = strategy
            d["replay_ratio"] = rr
            if strategy in ("baseline", "standard_reset"):
                d["n_networks"] = 1
            elif strategy == "rde" or (strategy == "altnet" and d["n_networks"] == 1):
                d["n_networks"] = 2
            if strategy == "baseline":
                d["halt_resets_after"] = None
            d["name"] = None
            out.append(config_from_dict(d))
    return out


def load_sweep(path: str | Path) -> list[ExperimentConfig]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("sweep must be a JSON object")
    base = {k: v for k, v in data.items() if k not in ("strategies", "replay_ratios")}
    for key in ("strategies", "replay_ratios"):
        if key in data and (not isinstance(data[key], list) or not data[key]):
            raise ConfigError(f"{key} must be a non-empty list")
    # validate the base loosely: the strategy-dependent checks run per point
    unknown = sorted(set(base) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = ExperimentConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return expand_sweep(cfg, data)
