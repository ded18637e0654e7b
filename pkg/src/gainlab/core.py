"""Reward channels, penalty estimation and gain-adaptation schemes.

Every scheme produces a :class:`GainVector` that weights one primary reward
against a set of semi-positive penalties::

    R = lambda0 * R0 - sum_i lambda_i * R_i

The array helpers (``*_table``) evaluate the same formulas for many
within-episode timesteps at once; the learner uses them in its inner loop and
the dataclass-level functions are thin wrappers around them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for an invalid adapter or constraint configuration."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class AdapterKind(str, Enum):
    PRIMARY_ONLY = "PrimaryOnly"
    FIXED_PENALTY = "FixedPenalty"
    QUAD_CBF = "QuadCBF"
    LOG_CBF = "LogCBF"
    PDO = "PDO"
    CRPO = "CRPO"
    OLAUX = "OLAUX"
    ROGER = "ROGER"


FIXED_KINDS = (AdapterKind.FIXED_PENALTY, AdapterKind.QUAD_CBF, AdapterKind.LOG_CBF)
DUAL_KINDS = (AdapterKind.PDO, AdapterKind.OLAUX)
CBF_KINDS = (AdapterKind.QUAD_CBF, AdapterKind.LOG_CBF)


@dataclass(frozen=True)
class ChannelSample:
    """One timestep: primary reward plus one non-negative penalty per constraint.

    ``signed`` optionally carries the signed state variable behind each
    penalty (e.g. tilt angle for an ``|tilt|`` penalty).
    """

    primary: float
    penalties: tuple[float, ...]
    t: int = 0
    signed: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if any(p < 0 for p in self.penalties):
            raise ValueError(f"penalties must be non-negative, got {self.penalties}")


@dataclass(frozen=True)
class ConstraintSpec:
    tau: tuple[float, ...]
    delta: tuple[float, ...] = ()
    k_sigma: float = 3.0
    names: tuple[str, ...] = ()
    # "plus": mean + k*std (conservative), "minus": mean - k*std
    estimator_sign: str = "plus"
    # "magnitude": statistics of the penalties; "signed": |stat of signed values|
    estimator_base: str = "magnitude"

    def __post_init__(self):
        tau = tuple(float(x) for x in self.tau)
        delta = tuple(float(x) for x in self.delta) if self.delta else (0.0,) * len(tau)
        names = tuple(self.names) if self.names else tuple(f"c{i}" for i in range(len(tau)))
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "names", names)
        if len(tau) == 0:
            raise ConfigError("tau", "at least one constraint is required")
        if len(delta) != len(tau):
            raise ConfigError("delta", "length must match tau")
        if len(names) != len(tau):
            raise ConfigError("names", "length must match tau")
        for i, (t, d) in enumerate(zip(tau, delta)):
            if not t > 0:
                raise ConfigError("tau", f"tau[{i}] must be > 0, got {t}")
            if not 0 <= d < t:
                raise ConfigError("delta", f"delta[{i}] must lie in [0, tau[{i}]), got {d}")
        if not self.k_sigma >= 0:
            raise ConfigError("k_sigma", "must be >= 0")
        if self.estimator_sign not in ("plus", "minus"):
            raise ConfigError("estimator_sign", "must be 'plus' or 'minus'")
        if self.estimator_base not in ("magnitude", "signed"):
            raise ConfigError("estimator_base", "must be 'magnitude' or 'signed'")

    @property
    def n(self) -> int:
        return len(self.tau)

    @property
    def margin(self) -> np.ndarray:
        """Tolerance-adjusted threshold ``tau - delta`` per constraint."""
        return np.asarray(self.tau) - np.asarray(self.delta)


@dataclass(frozen=True)
class PenaltyEstimate:
    r_tilde: np.ndarray
    window_len: int
    per_timestep: bool = False


@dataclass(frozen=True)
class GainVector:
    lambda0: float
    lam: np.ndarray
    delta_t: float = 0.0
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class AdapterState:
    kind: AdapterKind
    fixed_gains: Optional[np.ndarray] = None
    dual_lambda: Optional[np.ndarray] = None
    eta_lambda: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AdapterKind(self.kind))
        if self.fixed_gains is not None:
            object.__setattr__(self, "fixed_gains", np.asarray(self.fixed_gains, dtype=float))
        if self.dual_lambda is not None:
            object.__setattr__(self, "dual_lambda", np.asarray(self.dual_lambda, dtype=float))

    @classmethod
    def create(cls, kind, n_constraints, fixed_gains=None, eta_lambda=None, dual_init=0.0):
        """Build a validated adapter for ``n_constraints`` constraints."""
        kind = AdapterKind(kind)
        if kind in FIXED_KINDS:
            if fixed_gains is None:
                raise ConfigError("fixed_gains", f"required for {kind.value}")
            fg = np.broadcast_to(np.asarray(fixed_gains, dtype=float), (n_constraints,)).copy()
            if np.any(fg < 0):
                raise ConfigError("fixed_gains", "must be >= 0")
            return cls(kind, fixed_gains=fg)
        if kind in DUAL_KINDS:
            if eta_lambda is None or not eta_lambda > 0:
                raise ConfigError("eta_lambda", f"must be > 0 for {kind.value}")
            dual = np.broadcast_to(np.asarray(dual_init, dtype=float), (n_constraints,)).copy()
            if np.any(dual < 0):
                raise ConfigError("dual_init", "must be >= 0")
            return cls(kind, dual_lambda=dual, eta_lambda=float(eta_lambda))
        return cls(kind)


# --------------------------------------------------------------------------
# penalty estimation


def _window_arrays(window: Sequence[ChannelSample], per_timestep_index):
    if len(window) == 0:
        raise ValueError("empty estimation window")
    arity = len(window[0].penalties)
    if any(len(s.penalties) != arity for s in window):
        raise ValueError("channel arity mismatch")
    if per_timestep_index is not None:
        window = [s for s in window if s.t == per_timestep_index]
        if not window:
            raise ValueError("empty estimation window")
    pen = np.array([s.penalties for s in window], dtype=float).reshape(len(window), arity)
    if all(s.signed is not None for s in window):
        signed = np.array([s.signed for s in window], dtype=float).reshape(len(window), arity)
    else:
        signed = None
    return pen, signed


def estimate_from_array(values: np.ndarray, spec: ConstraintSpec, signed: Optional[np.ndarray] = None,
                        axis: int = 0) -> np.ndarray:
    """Confidence-adjusted penalty statistic along ``axis``.

    ``values`` may contain NaN for missing samples (ragged episodes); those are
    ignored, and an all-NaN slice yields NaN.
    """
    src = values
    if spec.estimator_base == "signed":
        if signed is None:
            raise ConfigError("estimator_base", "'signed' requires signed channel values")
        src = signed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(src, axis=axis)
        std = np.nanstd(src, axis=axis)  # population std
    if spec.estimator_base == "signed":
        mean = np.abs(mean)
    k = spec.k_sigma if spec.estimator_sign == "plus" else -spec.k_sigma
    return np.maximum(0.0, mean + k * std)


def estimate_penalties(window: Sequence[ChannelSample], spec: ConstraintSpec,
                       per_timestep_index: Optional[int] = None) -> PenaltyEstimate:
    """Windowed penalty estimate ``max(0, mean +/- k_sigma * std)`` per constraint."""
    pen, signed = _window_arrays(window, per_timestep_index)
    if pen.shape[1] != spec.n:
        raise ValueError("channel arity mismatch")
    r = estimate_from_array(pen, spec, signed)
    return PenaltyEstimate(r_tilde=r, window_len=pen.shape[0], per_timestep=per_timestep_index is not None)


# --------------------------------------------------------------------------
# gain schemes, vectorised over rows of r_tilde (one row per timestep)


def roger_table(r_tilde: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Adaptive gains for each row of ``r_tilde``.

    Returns ``(lambda0, lam, delta, ratios)`` with shapes (T,), (T, n), (T,), (T, n).
    ``tau`` is either (n,) or a per-row (T, n) array.
    """
    r_tilde = np.atleast_2d(np.asarray(r_tilde, dtype=float))
    tau = np.asarray(tau, dtype=float)
    if r_tilde.shape[-1] != tau.shape[-1]:
        raise ValueError("channel arity mismatch")
    sq = (r_tilde / tau) ** 2
    s = sq.sum(axis=1)
    delta = np.minimum(s, 1.0)
    n = tau.shape[-1]
    safe = np.where(s > 0, s, 1.0)
    ratios = np.where((s > 0)[:, None], sq / safe[:, None], 1.0 / n)
    lam = ratios * delta[:, None]
    lambda0 = 1.0 - delta
    return lambda0, lam, delta, ratios


def roger_gains(est: PenaltyEstimate, spec: ConstraintSpec) -> GainVector:
    l0, lam, delta, ratios = roger_table(est.r_tilde[None, :], spec.tau)
    return GainVector(float(l0[0]), lam[0], float(delta[0]), ratios[0])


def fixed_gains(state: AdapterState) -> GainVector:
    if state.fixed_gains is None:
        raise ConfigError("fixed_gains", "missing for fixed-gain adapter")
    n = state.fixed_gains.shape[0]
    return GainVector(1.0, state.fixed_gains.copy(), 0.0, np.zeros(n))


def cbf_transform(x_tilde, tau_i: float, delta_i: float, kind) -> np.ndarray | float:
    """Barrier-shaped penalty that is zero inside the margin ``tau - delta``."""
    kind = AdapterKind(kind)
    margin = tau_i - delta_i
    if not margin > 0:
        raise ConfigError("delta", f"tau ({tau_i}) must exceed delta ({delta_i})")
    x = np.asarray(x_tilde, dtype=float)
    if kind is AdapterKind.QUAD_CBF:
        out = np.maximum(0.0, x * x - margin * margin)
    elif kind is AdapterKind.LOG_CBF:
        active = x > margin
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(active, np.log(np.where(active, x, margin) / margin) ** 2, 0.0)
    else:
        raise ConfigError("kind", f"{kind.value} is not a barrier transform")
    return float(out) if out.ndim == 0 else out


def pdo_update(state: AdapterState, est: PenaltyEstimate, spec: ConstraintSpec):
    """Projected dual ascent on the penalty multipliers."""
    if state.eta_lambda is None:
        raise ConfigError("eta_lambda", "missing for PDO")
    if state.dual_lambda is None:
        raise ConfigError("dual_lambda", "missing for PDO")
    dual = np.maximum(0.0, state.dual_lambda + state.eta_lambda * (est.r_tilde - spec.margin))
    new = replace(state, dual_lambda=dual)
    return new, GainVector(1.0, dual.copy(), 0.0, np.zeros(spec.n))


def crpo_table(r_tilde: np.ndarray, spec: ConstraintSpec) -> tuple[np.ndarray, np.ndarray]:
    """Reward switching: all weight on the most violated constraint, if any."""
    r_tilde = np.atleast_2d(np.asarray(r_tilde, dtype=float))
    violated = r_tilde > spec.margin
    any_v = violated.any(axis=1)
    score = np.where(violated, r_tilde / np.asarray(spec.tau), -np.inf)
    pick = np.argmax(score, axis=1)  # first max on ties
    lam = np.zeros_like(r_tilde)
    rows = np.nonzero(any_v)[0]
    lam[rows, pick[rows]] = 1.0
    lambda0 = np.where(any_v, 0.0, 1.0)
    return lambda0, lam


def crpo_gains(est: PenaltyEstimate, spec: ConstraintSpec) -> GainVector:
    l0, lam = crpo_table(est.r_tilde[None, :], spec)
    return GainVector(float(l0[0]), lam[0], 0.0, np.zeros(spec.n))


def olaux_update(state: AdapterState, grad_primary, grad_penalty):
    """Move each multiplier by the alignment of primary and penalty gradients."""
    if state.eta_lambda is None or state.dual_lambda is None:
        raise ConfigError("eta_lambda", "missing for OL-AUX")
    g0 = np.asarray(grad_primary, dtype=float)
    if len(grad_penalty) != state.dual_lambda.shape[0]:
        raise ValueError("channel arity mismatch")
    dots = []
    for g in grad_penalty:
        g = np.asarray(g, dtype=float)
        if g.shape != g0.shape:
            raise ValueError(f"gradient dimension mismatch: {g.shape} vs {g0.shape}")
        dots.append(float(np.dot(g0, g)))
    dual = np.maximum(0.0, state.dual_lambda + state.eta_lambda * np.asarray(dots))
    new = replace(state, dual_lambda=dual)
    return new, GainVector(1.0, dual.copy(), 0.0, np.zeros(dual.shape[0]))


# --------------------------------------------------------------------------
# combination


def combine_reward(sample: ChannelSample, gains: GainVector) -> float:
    pen = np.asarray(sample.penalties, dtype=float)
    if pen.shape != gains.lam.shape:
        raise ValueError("channel arity mismatch")
    return float(gains.lambda0 * sample.primary - np.dot(gains.lam, pen))


def combine_advantages(advantages, gains: GainVector) -> float:
    adv = np.asarray(advantages, dtype=float)
    if adv.shape != (1 + gains.lam.shape[0],):
        raise ValueError("channel arity mismatch")
    return float(gains.lambda0 * adv[0] - np.dot(gains.lam, adv[1:]))


def combine_table(channels: np.ndarray, lambda0: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Row-wise combination of ``channels`` (N, 1+n) with per-row gains."""
    return lambda0 * channels[:, 0] - np.einsum("ij,ij->i", lam, channels[:, 1:])
