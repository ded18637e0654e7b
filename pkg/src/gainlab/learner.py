"""Parameter-space exploration with the AGOL update and online gain adaptation.

One trial alternates between

1. drawing explored parameters around the current mean (once per episode),
2. rolling out one episode and storing per-channel rewards,
3. recomputing reward-weighting gains from the last ``episodes_per_window``
   episodes, separately for every within-episode timestep, and
4. an AGOL step on mean and exploration scale once the window is full.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import (
    CBF_KINDS,
    AdapterKind,
    AdapterState,
    ConfigError,
    ConstraintSpec,
    GainVector,
    PenaltyEstimate,
    cbf_transform,
    combine_table,
    crpo_table,
    estimate_from_array,
    olaux_update,
    pdo_update,
    roger_table,
)
from .envs import DivergenceError, Env

log = logging.getLogger(__name__)

G_STD_FLOOR = 1e-8


class TrialDiverged(RuntimeError):
    """A non-finite advantage or parameter appeared during an update."""


@dataclass(frozen=True)
class PolicyState:
    theta: np.ndarray
    sigma_theta: np.ndarray
    theta_explored: np.ndarray

    @classmethod
    def initial(cls, theta, sigma_init):
        theta = np.asarray(theta, dtype=float)
        sigma = np.full_like(theta, float(sigma_init))
        return cls(theta, sigma, theta.copy())


@dataclass(frozen=True)
class LearnerConfig:
    eta_theta: float = 0.01
    eta_sigma: float = 0.005
    episodes_per_window: int = 8
    timesteps_per_episode: int = 70
    return_horizon: int = 20
    sigma_init: float = 0.05
    sigma_min: float = 1e-3
    per_timestep_gains: bool = True

    def __post_init__(self):
        for name in ("eta_theta", "eta_sigma", "sigma_init", "sigma_min"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"learner.{name}", "must be > 0")
        if self.episodes_per_window < 1:
            raise ConfigError("learner.episodes_per_window", "must be >= 1")
        if self.timesteps_per_episode < 1:
            raise ConfigError("learner.timesteps_per_episode", "must be >= 1")
        if not 1 <= self.return_horizon <= self.timesteps_per_episode:
            raise ConfigError("learner.return_horizon", "must lie in [1, timesteps_per_episode]")


@dataclass(frozen=True)
class ReturnStats:
    g: np.ndarray
    g_bar: float
    g_std: float

    @classmethod
    def of(cls, g):
        g = np.asarray(g, dtype=float)
        return cls(g, float(g.mean()), max(float(g.std()), G_STD_FLOOR))

    def advantages(self) -> np.ndarray:
        return (self.g - self.g_bar) / self.g_std


@dataclass
class Episode:
    primary: np.ndarray          # (T,)
    penalties: np.ndarray        # (T, m)
    signed: np.ndarray           # (T, m)
    grad: np.ndarray             # (T, p)  |d action / d theta|
    theta_explored: np.ndarray   # (p,)
    states: np.ndarray           # (T, s)
    theta_mean: np.ndarray = None    # (p,) mean the sample was drawn around
    sigma: np.ndarray = None         # (p,) exploration scale at draw time

    def __len__(self):
        return self.primary.shape[0]


class TrajectoryBuffer:
    """Ring of the most recent episodes; oldest evicted first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: deque[Episode] = deque(maxlen=capacity)

    def append(self, ep: Episode):
        self.episodes.append(ep)

    def __len__(self):
        return len(self.episodes)

    @property
    def full(self) -> bool:
        return len(self.episodes) == self.capacity

    @property
    def max_len(self) -> int:
        return max(len(e) for e in self.episodes)

    def padded(self, attr: str) -> np.ndarray:
        """(E, T_max, k) stack of ``attr`` with NaN past each episode's end."""
        eps = list(self.episodes)
        t_max = self.max_len
        first = getattr(eps[0], attr)
        width = first.shape[1]
        out = np.full((len(eps), t_max, width), np.nan)
        for i, e in enumerate(eps):
            v = getattr(e, attr)
            out[i, :v.shape[0]] = v
        return out

    def flat(self, attr: str) -> np.ndarray:
        return np.concatenate([getattr(e, attr) for e in self.episodes], axis=0)

    def timesteps(self) -> np.ndarray:
        return np.concatenate([np.arange(len(e)) for e in self.episodes])


@dataclass
class GainTable:
    """Gains indexed by within-episode timestep."""

    lambda0: np.ndarray   # (T,)
    lam: np.ndarray       # (T, m)
    delta: np.ndarray     # (T,)

    @classmethod
    def constant(cls, lambda0, lam, length):
        lam = np.asarray(lam, dtype=float)
        return cls(np.full(length, float(lambda0)), np.tile(lam, (length, 1)), np.zeros(length))

    def at(self, t: int) -> GainVector:
        return GainVector(float(self.lambda0[t]), self.lam[t].copy(), float(self.delta[t]))

    def __len__(self):
        return self.lambda0.shape[0]


# ---------------------------------------------------------------------------


def explore(policy: PolicyState, rng: np.random.Generator) -> PolicyState:
    theta_explored = rng.normal(policy.theta, policy.sigma_theta)
    return replace(policy, theta_explored=theta_explored)


def _windowed_mean(values: np.ndarray, horizon: int) -> np.ndarray:
    """Mean of values[t : t+horizon] along axis 0, truncated at the end."""
    n = values.shape[0]
    c = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    t = np.arange(n)
    end = np.minimum(t + horizon, n)
    counts = (end - t).reshape((-1,) + (1,) * (values.ndim - 1))
    return (c[end] - c[t]) / counts


def channel_values(ep: Episode, penalty_transform: Optional[Callable] = None) -> np.ndarray:
    pen = ep.penalties if penalty_transform is None else penalty_transform(ep.penalties)
    return np.column_stack([ep.primary, pen])


def channel_returns(buffer: TrajectoryBuffer, horizon: int,
                    penalty_transform: Optional[Callable] = None) -> list[ReturnStats]:
    """Per-channel horizon-averaged returns for every stored sample (primary first)."""
    if len(buffer) == 0:
        raise ValueError("empty trajectory buffer")
    g = np.concatenate([_windowed_mean(channel_values(e, penalty_transform), horizon)
                        for e in buffer.episodes], axis=0)
    return [ReturnStats.of(g[:, c]) for c in range(g.shape[1])]


def agol_update(policy: PolicyState, buffer: TrajectoryBuffer, gains: GainTable, cfg: LearnerConfig,
                returns: Optional[list[ReturnStats]] = None):
    """One AGOL step on ``theta`` and ``sigma_theta``.

    Returns the new policy and a (1 + m, p) array of per-channel parameter
    directions, each computed with that channel's normalised advantage alone.
    """
    if returns is None:
        returns = channel_returns(buffer, cfg.return_horizon)
    adv = np.column_stack([r.advantages() for r in returns])          # (N, 1+m)
    t_idx = buffer.timesteps()
    combined = combine_table(adv, gains.lambda0[t_idx], gains.lam[t_idx])
    grad = buffer.flat("grad")                                         # (N, p)
    lengths = [len(e) for e in buffer.episodes]
    eps = list(buffer.episodes)
    noise = np.stack([e.theta_explored - e.theta_mean for e in eps])
    sig = np.stack([e.sigma for e in eps])
    diff = np.repeat(noise, lengths, axis=0)
    sigma = np.repeat(sig, lengths, axis=0)

    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        w_theta = grad * diff / sigma ** 2
        w_sigma = grad * (diff ** 2 - sigma ** 2) / sigma ** 3
        d_theta = cfg.eta_theta * (w_theta.T @ combined)
        d_sigma = cfg.eta_sigma * (w_sigma.T @ combined)
        directions = cfg.eta_theta * (w_theta.T @ adv).T             # (1+m, p)
        new_theta = policy.theta + d_theta
        new_sigma = np.maximum(policy.sigma_theta + d_sigma, cfg.sigma_min)
    if not (np.all(np.isfinite(combined)) and np.all(np.isfinite(new_theta)) and np.all(np.isfinite(new_sigma))):
        raise TrialDiverged(f"non-finite update: theta={new_theta}, sigma={new_sigma}")
    return replace(policy, theta=new_theta, sigma_theta=new_sigma), directions


# ---------------------------------------------------------------------------
# gain recomputation


def penalty_transform_for(adapter: AdapterState, spec: ConstraintSpec) -> Optional[Callable]:
    if adapter.kind not in CBF_KINDS:
        return None

    def transform(pen):
        return np.column_stack([cbf_transform(pen[:, i], spec.tau[i], spec.delta[i], adapter.kind)
                                for i in range(spec.n)])
    return transform


def _timestep_estimates(buffer: TrajectoryBuffer, spec: ConstraintSpec, per_timestep: bool) -> np.ndarray:
    """(T_max, m) penalty estimates; timesteps no stored episode reached use the pooled estimate."""
    pen = buffer.padded("penalties")
    signed = buffer.padded("signed")
    pooled = estimate_from_array(pen.reshape(-1, spec.n), spec, signed.reshape(-1, spec.n))
    t_max = pen.shape[1]
    if not per_timestep:
        return np.tile(pooled, (t_max, 1))
    est = estimate_from_array(pen, spec, signed, axis=0)
    return np.where(np.isnan(est), pooled, est)


def compute_gains(adapter: AdapterState, buffer: TrajectoryBuffer, spec: ConstraintSpec,
                  per_timestep: bool = True, directions: Optional[np.ndarray] = None):
    """Recompute gains from the stored window. Returns ``(adapter, GainTable)``."""
    t_max = buffer.max_len
    kind = adapter.kind
    n = spec.n
    if kind is AdapterKind.PRIMARY_ONLY:
        return adapter, GainTable.constant(1.0, np.zeros(n), t_max)
    if adapter.fixed_gains is not None:
        return adapter, GainTable.constant(1.0, adapter.fixed_gains, t_max)
    if kind is AdapterKind.ROGER:
        r = _timestep_estimates(buffer, spec, per_timestep)
        l0, lam, delta, _ = roger_table(r, spec.tau)
        return adapter, GainTable(l0, lam, delta)
    if kind is AdapterKind.CRPO:
        r = _timestep_estimates(buffer, spec, per_timestep)
        l0, lam = crpo_table(r, spec)
        return adapter, GainTable(l0, lam, np.zeros(t_max))
    if kind is AdapterKind.PDO:
        pooled = _timestep_estimates(buffer, spec, per_timestep=False)[0]
        window = sum(len(e) for e in buffer.episodes)
        adapter, g = pdo_update(adapter, PenaltyEstimate(pooled, window), spec)
        return adapter, GainTable.constant(g.lambda0, g.lam, t_max)
    if kind is AdapterKind.OLAUX:
        if directions is not None:
            adapter, g = olaux_update(adapter, directions[0], list(directions[1:]))
        else:
            g = GainVector(1.0, adapter.dual_lambda.copy())
        return adapter, GainTable.constant(g.lambda0, g.lam, t_max)
    raise ConfigError("adapter.kind", f"unsupported adapter {kind}")


# ---------------------------------------------------------------------------
# episode loop


@dataclass
class EpisodeResult:
    rows: np.ndarray
    policy: PolicyState
    adapter: AdapterState
    gains: GainTable
    directions: Optional[np.ndarray]
    updated: bool
    failed: bool = False
    fell: bool = False
    info: dict = field(default_factory=dict)


def rollout(env: Env, policy: PolicyState, n_steps: int) -> tuple[Episode, bool]:
    """Roll out one episode from an already reset ``env``. Returns (episode, diverged)."""
    prim, pens, signed, grads, states = [], [], [], [], []
    diverged = False
    for t in range(n_steps):
        action, g = env.act(policy.theta_explored, t)
        try:
            obs = env.step(action)
        except DivergenceError:
            diverged = True
            break
        ch = obs.channels
        prim.append(ch.primary)
        pens.append(ch.penalties)
        signed.append(ch.signed if ch.signed is not None else ch.penalties)
        grads.append(g)
        states.append(obs.state)
        if obs.done:
            break
    p = len(policy.theta)
    ep = Episode(
        primary=np.asarray(prim, dtype=float),
        penalties=np.asarray(pens, dtype=float).reshape(len(prim), -1),
        signed=np.asarray(signed, dtype=float).reshape(len(prim), -1),
        grad=np.asarray(grads, dtype=float).reshape(len(prim), p),
        theta_explored=np.array(policy.theta_explored, dtype=float),
        states=np.asarray(states, dtype=float).reshape(len(prim), len(env.state_names)),
        theta_mean=np.array(policy.theta, dtype=float),
        sigma=np.array(policy.sigma_theta, dtype=float),
    )
    return ep, diverged


def run_episode(env: Env, policy: PolicyState, adapter: AdapterState, buffer: TrajectoryBuffer,
                spec: ConstraintSpec, cfg: LearnerConfig, episode: int = 0,
                directions: Optional[np.ndarray] = None) -> EpisodeResult:
    """Roll out, store, recompute gains and (with a full window) update the policy.

    ``env`` must be reset and ``policy`` explored by the caller. ``buffer`` is
    appended to in place.
    """
    ep, diverged = rollout(env, policy, cfg.timesteps_per_episode)
    m = spec.n
    if diverged or len(ep) == 0:
        log.warning("episode %d diverged after %d steps; skipped", episode, len(ep))
        rows = _rows(episode, ep, GainTable.constant(1.0, np.zeros(m), max(len(ep), 1)), np.zeros(len(ep)))
        return EpisodeResult(rows, policy, adapter, GainTable.constant(1.0, np.zeros(m), 1), directions,
                             False, failed=True)

    buffer.append(ep)
    transform = penalty_transform_for(adapter, spec)
    adapter, gains = compute_gains(adapter, buffer, spec, cfg.per_timestep_gains, directions)
    returns = channel_returns(buffer, cfg.return_horizon, transform)

    own = _windowed_mean(channel_values(ep, transform), cfg.return_horizon)
    t = np.arange(len(ep))
    g_comb = combine_table(own, gains.lambda0[t], gains.lam[t])

    updated = False
    if buffer.full:
        policy, directions = agol_update(policy, buffer, gains, cfg, returns)
        updated = True
    fell = bool(np.any(env.is_failure(ep.states)))
    return EpisodeResult(_rows(episode, ep, gains, g_comb), policy, adapter, gains, directions, updated,
                         fell=fell)


def _rows(episode: int, ep: Episode, gains: GainTable, g_comb: np.ndarray) -> np.ndarray:
    n = len(ep)
    t = np.arange(n)
    return np.column_stack([
        np.full(n, float(episode)), t.astype(float), ep.states, ep.primary, ep.penalties,
        gains.lambda0[t], gains.lam[t], gains.delta[t], g_comb,
    ]) if n else np.zeros((0, 0))
