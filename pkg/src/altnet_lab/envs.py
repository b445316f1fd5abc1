"""Desk-scale continuous-control tasks.

Pendulum swing-up
    State ``(theta, theta_dot)`` with ``theta = 0`` upright, wrapped to
    ``(-pi, pi]``. Observation ``(cos theta, sin theta, theta_dot)``. One step of
    semi-implicit Euler with ``dt = 0.05``::

        torque     = torque_scale * clip(a, -2, 2)
        theta_dot' = clip(theta_dot + (3 g / (2 l) sin theta + 3 torque / (m l^2)) dt, -8, 8)
        theta'     = wrap(theta + theta_dot' dt)

    Reward ``-(theta^2 + 0.1 theta_dot^2 + 0.001 a^2)`` evaluated on the
    pre-step state and the clamped action. Initial ``theta ~ U(-pi, pi)``,
    ``theta_dot ~ U(-1, 1)``.

Point-mass reacher
    A unit mass in the square ``[-1, 1]^2`` pushed by a force in ``[-1, 1]^2``.
    Reward is 1 inside a 0.1 radius of the target, minus a small control
    cost, and 0 elsewhere.

Neither task has terminal states; episodes are truncated after
``max_episode_steps`` (200).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .nn_core import make_rng


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int = 200

    def __post_init__(self):
        if not np.all(np.asarray(self.action_low) < np.asarray(self.action_high)):
            raise ConfigError("action_low must be strictly below action_high")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


def wrap_angle(theta: float) -> float:
    """Map to ``(-pi, pi]``."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


class Env:
    """Common step bookkeeping: episode clock, action clamping and counters."""

    name = "env"
    default_params: dict[str, float] = {}

    def __init__(self, max_episode_steps: int = 200, **params: float):
        unknown = set(params) - set(self.default_params)
        if unknown:
            raise ConfigError(f"unknown {self.name} parameter(s): {sorted(unknown)}")
        self.params = {**self.default_params, **{k: float(v) for k, v in params.items()}}
        self.max_episode_steps = int(max_episode_steps)
        self.clamp_count = 0
        self.elapsed = 0
        self.spec = self._make_spec()

    def _make_spec(self) -> EnvSpec:
        raise NotImplementedError

    def set_params(self, **params: float) -> None:
        unknown = set(params) - set(self.default_params)
        if unknown:
            raise ConfigError(f"unknown {self.name} parameter(s): {sorted(unknown)}")
        self.params.update({k: float(v) for k, v in params.items()})

    def physical_params(self) -> dict[str, float]:
        return dict(self.params)

    def reset(self, seed: int) -> np.ndarray:
        self.elapsed = 0
        self._reset_state(make_rng(seed))
        return self._observe()

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite action {a}")
        clipped = np.clip(a, self.spec.action_low, self.spec.action_high)
        if np.any(clipped != a):
            self.clamp_count += 1
        reward, terminal = self._advance(clipped)
        self.elapsed += 1
        truncated = (not terminal) and self.elapsed >= self.max_episode_steps
        return StepResult(self._observe(), float(reward), bool(terminal), bool(truncated))

    def _reset_state(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Env):
    name = "pendulum"
    default_params = {"gravity": 10.0, "length": 1.0, "mass": 1.0, "torque_scale": 1.0}
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0
    init_speed = 1.0

    def __init__(self, max_episode_steps: int = 200, **params: float):
        super().__init__(max_episode_steps, **params)
        self.theta = math.pi
        self.theta_dot = 0.0

    def _make_spec(self) -> EnvSpec:
        return EnvSpec(3, 1, np.array([-self.max_torque]), np.array([self.max_torque]), self.max_episode_steps)

    def _reset_state(self, rng):
        self.theta = float(rng.uniform(-math.pi, math.pi))
        self.theta_dot = float(rng.uniform(-self.init_speed, self.init_speed))

    def set_state(self, theta: float, theta_dot: float) -> np.ndarray:
        """Place the pendulum at an explicit state (episode clock restarts)."""
        self.elapsed = 0
        self.theta = wrap_angle(float(theta))
        self.theta_dot = float(theta_dot)
        return self._observe()

    def _advance(self, action):
        p = self.params
        a = float(action[0])
        th, thd = self.theta, self.theta_dot
        reward = -(th * th + 0.1 * thd * thd + 0.001 * a * a)
        torque = p["torque_scale"] * a
        thd = thd + (3.0 * p["gravity"] / (2.0 * p["length"]) * math.sin(th)
                     + 3.0 * torque / (p["mass"] * p["length"] ** 2)) * self.dt
        thd = min(max(thd, -self.max_speed), self.max_speed)
        self.theta = wrap_angle(th + thd * self.dt)
        self.theta_dot = thd
        return reward, False

    def _observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])


class PointMassReacher(Env):
    name = "reacher"
    default_params = {"mass": 1.0, "damping": 0.5, "force_scale": 1.0}
    dt = 0.05
    max_speed = 2.0
    target_radius = 0.1

    def __init__(self, max_episode_steps: int = 200, **params: float):
        super().__init__(max_episode_steps, **params)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.target = np.zeros(2)

    def _make_spec(self) -> EnvSpec:
        return EnvSpec(6, 2, -np.ones(2), np.ones(2), self.max_episode_steps)

    def _reset_state(self, rng):
        self.pos = rng.uniform(-0.9, 0.9, size=2)
        self.vel = np.zeros(2)
        self.target = rng.uniform(-0.9, 0.9, size=2)

    def _advance(self, action):
        p = self.params
        force = p["force_scale"] * action
        acc = (force - p["damping"] * self.vel) / p["mass"]
        self.vel = np.clip(self.vel + acc * self.dt, -self.max_speed, self.max_speed)
        pos = self.pos + self.vel * self.dt
        hit = np.abs(pos) > 1.0
        self.vel = np.where(hit, 0.0, self.vel)
        self.pos = np.clip(pos, -1.0, 1.0)
        dist = float(np.linalg.norm(self.target - self.pos))
        reward = (1.0 if dist < self.target_radius else 0.0) - 0.01 * float(action @ action)
        return reward, False

    def _observe(self):
        return np.concatenate([self.pos, self.vel, self.target - self.pos])


ENVIRONMENTS = {"pendulum": Pendulum, "reacher": PointMassReacher}
ENV_NAMES = ("pendulum", "reacher", "nonstationary_pendulum")

# Desk-scale non-stationary pendulum: gravity and torque response shift twice.
NONSTATIONARY_PENDULUM_SCHEDULE = (
    (40_000, {"gravity": 14.0}),
    (70_000, {"gravity": 10.0, "torque_scale": 0.75}),
)


class NonStationaryEnv:
    """Wrapper that changes physical parameters once a global step count is passed.

    ``schedule`` holds ``(step_threshold, overrides)`` pairs with strictly
    increasing thresholds. A change takes effect at the first episode reset
    after the global counter has reached its threshold, and persists.
    """

    def __init__(self, env: Env, schedule: Sequence[tuple[int, dict[str, float]]] = ()):
        thresholds = [int(t) for t, _ in schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError(f"schedule thresholds must be strictly increasing: {thresholds}")
        for _, overrides in schedule:
            unknown = set(overrides) - set(env.default_params)
            if unknown:
                raise ConfigError(f"unknown {env.name} parameter(s) in schedule: {sorted(unknown)}")
        self.env = env
        self.schedule = [(int(t), dict(o)) for t, o in schedule]
        self.global_step = 0
        self._applied = 0
        self.name = env.name
        self.spec = env.spec

    @property
    def params(self) -> dict[str, float]:
        return self.env.params

    @property
    def clamp_count(self) -> int:
        return self.env.clamp_count

    def physical_params(self) -> dict[str, float]:
        return self.env.physical_params()

    def phase(self) -> int:
        """Number of schedule entries applied so far."""
        return self._applied

    def reset(self, seed: int) -> np.ndarray:
        while self._applied < len(self.schedule) and self.global_step >= self.schedule[self._applied][0]:
            self.env.set_params(**self.schedule[self._applied][1])
            self._applied += 1
        return self.env.reset(seed)

    def step(self, action) -> StepResult:
        self.global_step += 1
        return self.env.step(action)


def apply_nonstationarity(env: Env, schedule: Sequence[tuple[int, dict[str, float]]]) -> NonStationaryEnv:
    return NonStationaryEnv(env, schedule)


def make_env(name: str, overrides: dict[str, Any] | None = None, schedule=None, max_episode_steps: int = 200):
    """Build an environment by name.

    ``nonstationary_pendulum`` is the pendulum with the built-in schedule
    unless an explicit ``schedule`` is given.
    """
    overrides = dict(overrides or {})
    if name == "nonstationary_pendulum":
        base = Pendulum(max_episode_steps, **overrides)
        return NonStationaryEnv(base, NONSTATIONARY_PENDULUM_SCHEDULE if schedule is None else schedule)
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {list(ENV_NAMES)}")
    env = ENVIRONMENTS[name](max_episode_steps, **overrides)
    if schedule:
        return NonStationaryEnv(env, schedule)
    return env


def evaluation_copy(env) -> Env:
    """Fresh instance of the underlying task carrying the current physical parameters."""
    base = env.env if isinstance(env, NonStationaryEnv) else env
    return type(base)(base.max_episode_steps, **base.physical_params())
