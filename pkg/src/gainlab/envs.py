"""Desk-scale constrained environments.

``LandscapeEnv``
    one-step bandit on the unit square: a Gaussian reward bump whose ascent
    direction runs into a thresholded hazard band.
``CartTiltEnv``
    a cart with a hanging rod. The primary reward is cart speed, the single
    penalty is the rod tilt ``|phi|``. Accelerating hard makes the rod swing
    out, so speed trades against tilt.

Both environments also own the policy parametrisation used by the learner:
``act(theta_explored, t)`` returns the action and ``|d action / d theta|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import ChannelSample, ConfigError, ConstraintSpec


class DivergenceError(RuntimeError):
    """Non-finite environment state."""


@dataclass(frozen=True)
class EnvObservation:
    state: tuple[float, ...]
    channels: ChannelSample
    violated: tuple[bool, ...]
    done: bool


class Env(Protocol):
    name: str
    state_names: tuple[str, ...]
    n_params: int
    episode_length: int

    def constraint_spec(self, **overrides) -> ConstraintSpec: ...
    def initial_theta(self) -> np.ndarray: ...
    def reset(self, rng: np.random.Generator) -> EnvObservation: ...
    def act(self, theta_explored: np.ndarray, t: int) -> tuple[object, np.ndarray]: ...
    def step(self, action) -> EnvObservation: ...
    def is_failure(self, states: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# reward landscape


@dataclass(frozen=True)
class LandscapeConfig:
    mode: str = "bandit"
    reward_center: tuple[float, float] = (0.8, 0.5)
    reward_width: float = 0.08
    hazard_onset: float = 0.6
    hazard_scale: float = 0.4
    tau: float = 0.75
    theta_init: tuple[float, float] = (0.2, 0.2)
    param_scale: float = 1.0

    def __post_init__(self):
        if self.mode != "bandit":
            raise ConfigError("env.mode", f"unsupported landscape mode {self.mode!r}")
        if not 0 < self.hazard_onset < 1:
            raise ConfigError("env.hazard_onset", "must lie in (0, 1)")
        if not 0 < self.tau < 1:
            raise ConfigError("env.tau", "must lie in (0, 1)")
        if not self.reward_width > 0:
            raise ConfigError("env.reward_width", "must be > 0")
        if not self.hazard_scale > 0:
            raise ConfigError("env.hazard_scale", "must be > 0")


def landscape_step(theta_explored, cfg: LandscapeConfig) -> EnvObservation:
    th = np.clip(np.asarray(theta_explored, dtype=float), 0.0, 1.0)
    c = np.asarray(cfg.reward_center)
    r0 = math.exp(-float(np.sum((th - c) ** 2)) / cfg.reward_width)
    # rounded so that boundary inputs like 0.9 land exactly on the threshold
    h = round(max(0.0, th[0] - cfg.hazard_onset) / cfg.hazard_scale, 12)
    state = (float(th[0]), float(th[1]))
    return EnvObservation(state, ChannelSample(r0, (h,), 0, (h,)), (h > cfg.tau,), True)


class LandscapeEnv:
    name = "landscape"
    state_names = ("theta1", "theta2")
    n_params = 2
    episode_length = 1

    def __init__(self, cfg: LandscapeConfig | None = None):
        self.cfg = cfg or LandscapeConfig()

    def constraint_spec(self, **overrides) -> ConstraintSpec:
        return ConstraintSpec(tau=(self.cfg.tau,), names=("hazard",), **overrides)

    def initial_theta(self) -> np.ndarray:
        return np.array(self.cfg.theta_init, dtype=float)

    def reset(self, rng=None) -> EnvObservation:
        return EnvObservation((0.0, 0.0), ChannelSample(0.0, (0.0,), 0, (0.0,)), (False,), False)

    def act(self, theta_explored, t):
        return theta_explored, np.ones(2)

    def step(self, action) -> EnvObservation:
        return landscape_step(action, self.cfg)

    def is_failure(self, states):
        return np.zeros(len(states), dtype=bool)


# ---------------------------------------------------------------------------
# cart with hanging rod


@dataclass(frozen=True)
class CartTiltConfig:
    m_cart: float = 1.0
    m_pole: float = 0.3
    half_length: float = 0.5
    gravity: float = 9.81
    dt: float = 0.02
    substeps: int = 10
    force_limit: float = 10.0
    friction: float = 0.1
    tau_tilt: float = 0.2
    episode_length: int = 70
    fall_angle: float = math.pi / 4
    reset_jitter: float = 0.01
    n_basis: int = 8
    param_scale: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("env.dt", "must be > 0")
        if not (self.m_cart > 0 and self.m_pole > 0):
            raise ConfigError("env.m_cart", "masses must be > 0")
        if not self.half_length > 0:
            raise ConfigError("env.half_length", "must be > 0")
        if not self.tau_tilt > 0:
            raise ConfigError("env.tau_tilt", "must be > 0")
        if self.substeps < 1:
            raise ConfigError("env.substeps", "must be >= 1")
        if self.episode_length < 1:
            raise ConfigError("env.episode_length", "must be >= 1")
        if self.n_basis < 1:
            raise ConfigError("env.n_basis", "must be >= 1")


def _cart_advance(x, xd, phi, phid, force, cfg: CartTiltConfig):
    """Semi-implicit Euler over one control interval.

    ``phi`` is measured from the hanging position. The rod's centre of mass
    sits at ``(x - l sin(phi), -l cos(phi))``.
    """
    total = cfg.m_cart + cfg.m_pole
    ml = cfg.m_pole * cfg.half_length
    h = cfg.dt / cfg.substeps
    for _ in range(cfg.substeps):
        s, c = math.sin(phi), math.cos(phi)
        temp = (force - cfg.friction * xd - ml * phid * phid * s) / total
        phidd = (c * temp - cfg.gravity * s) / (cfg.half_length * (4.0 / 3.0 - cfg.m_pole * c * c / total))
        xdd = temp + ml * phidd * c / total
        xd += xdd * h
        phid += phidd * h
        x += xd * h
        phi += phid * h
    return x, xd, phi, phid


def cart_step(state, action, cfg: CartTiltConfig, t: int = 0) -> EnvObservation:
    force = min(max(float(action), -cfg.force_limit), cfg.force_limit)
    try:
        x, xd, phi, phid = _cart_advance(*map(float, state), force, cfg)
    except (ValueError, OverflowError):
        raise DivergenceError("dynamics diverged") from None
    if not all(map(math.isfinite, (x, xd, phi, phid))):
        raise DivergenceError("dynamics diverged")
    tilt = abs(phi)
    fell = tilt >= cfg.fall_angle
    done = fell or t + 1 >= cfg.episode_length
    return EnvObservation((x, xd, phi, phid), ChannelSample(xd, (tilt,), t, (phi,)), (tilt > cfg.tau_tilt,), done)


def cart_energy(state, cfg: CartTiltConfig) -> float:
    """Mechanical energy, potential measured from the hanging rest position."""
    _, xd, phi, phid = state
    m, l = cfg.m_pole, cfg.half_length
    kinetic = (0.5 * (cfg.m_cart + m) * xd * xd - m * l * math.cos(phi) * xd * phid
               + (2.0 / 3.0) * m * l * l * phid * phid)
    return kinetic + m * cfg.gravity * l * (1.0 - math.cos(phi))


def triangular_basis(n_basis: int, length: int) -> np.ndarray:
    """(length, n_basis) overlapping triangles spanning the episode; rows sum to 1."""
    t = np.arange(length, dtype=float)
    if n_basis == 1:
        return np.ones((length, 1))
    centers = np.linspace(0.0, length - 1, n_basis)
    width = centers[1] - centers[0]
    return np.maximum(0.0, 1.0 - np.abs(t[:, None] - centers[None, :]) / width)


class CartTiltEnv:
    name = "cart"
    state_names = ("x", "x_dot", "phi", "phi_dot")

    def __init__(self, cfg: CartTiltConfig | None = None):
        self.cfg = cfg or CartTiltConfig()
        self.n_params = self.cfg.n_basis
        self.episode_length = self.cfg.episode_length
        self.basis = triangular_basis(self.cfg.n_basis, self.cfg.episode_length)
        self._state = (0.0, 0.0, 0.0, 0.0)
        self._t = 0

    def constraint_spec(self, **overrides) -> ConstraintSpec:
        return ConstraintSpec(tau=(self.cfg.tau_tilt,), names=("tilt",), **overrides)

    def initial_theta(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def reset(self, rng: np.random.Generator) -> EnvObservation:
        phi = float(rng.uniform(-self.cfg.reset_jitter, self.cfg.reset_jitter))
        self._state = (0.0, 0.0, phi, 0.0)
        self._t = 0
        return EnvObservation(self._state, ChannelSample(0.0, (abs(phi),), 0, (phi,)),
                              (abs(phi) > self.cfg.tau_tilt,), False)

    def act(self, theta_explored, t):
        """Open-loop force profile ``F * clip(basis(t) . theta, -1, 1)``."""
        b = self.basis[t]
        u = float(b @ theta_explored)
        return self.cfg.force_limit * min(max(u, -1.0), 1.0), b

    def step(self, action) -> EnvObservation:
        obs = cart_step(self._state, action, self.cfg, self._t)
        self._state = obs.state
        self._t += 1
        return obs

    def is_failure(self, states):
        states = np.asarray(states, dtype=float)
        return np.abs(states[:, 2]) >= self.cfg.fall_angle


ENV_CONFIGS = {"landscape": (LandscapeEnv, LandscapeConfig), "cart": (CartTiltEnv, CartTiltConfig)}


def make_env(name: str, **params) -> Env:
    if name not in ENV_CONFIGS:
        raise ConfigError("env.name", f"unknown environment {name!r}")
    env_cls, cfg_cls = ENV_CONFIGS[name]
    known = cfg_cls.__dataclass_fields__
    for k in params:
        if k not in known:
            raise ConfigError(f"env.{k}", "unknown field")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    return env_cls(cfg_cls(**clean))


def env_reset(env: Env, seed) -> EnvObservation:
    """Reset ``env`` with a generator derived from ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return env.reset(rng)
