"""Statistics and numerical property checks over trial logs."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .core import ConstraintSpec, combine_table, roger_table
from .triallog import TrialLog

__all__ = [
    "TrialLog",
    "ComparisonReport",
    "TrialSummary",
    "kde_tail_probability",
    "percentile",
    "two_proportion_test",
    "welch_t_test",
    "surface_grid",
    "surface_csv",
    "check_reward_identity",
    "check_learning_inequality",
    "check_lyapunov_boundary",
    "summarize_trial",
    "compare_summaries",
]


# ---------------------------------------------------------------------------
# statistics


def kde_tail_probability(samples, threshold: float) -> float:
    """P(X > threshold) under a Gaussian KDE with Silverman's bandwidth."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        return 0.0
    sd = float(np.std(x, ddof=1)) if n >= 2 else 0.0
    if n < 2 or sd == 0.0:
        return float(np.mean(x > threshold))
    h = 1.06 * sd * n ** (-0.2)
    return float(np.mean(1.0 - ndtr((threshold - x) / h)))


def percentile(samples, q: float) -> float:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("percentile of empty sample")
    if not 0 < q < 100:
        raise ValueError("q must lie in (0, 100)")
    return float(np.percentile(x, q, method="linear"))


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> float:
    """Two-sided pooled z-test for p1 == p2."""
    if n1 < 1 or n2 < 1 or not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("need n >= 1 and 0 <= k <= n")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        return 1.0
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (k1 / n1 - k2 / n2) / se
    return float(min(1.0, 2.0 * ndtr(-abs(z))))


def welch_t_test(a, b, alternative: str = "two-sided") -> float:
    """Welch t-test p-value. ``alternative='greater'`` tests mean(a) > mean(b)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 samples")
    if np.var(a) == 0 and np.var(b) == 0:
        diff = a.mean() - b.mean()
        if diff == 0:
            return 1.0
        if alternative == "two-sided":
            return 0.0
        return 0.0 if (diff > 0) == (alternative == "greater") else 1.0
    return float(stats.ttest_ind(a, b, equal_var=False, alternative=alternative).pvalue)


# ---------------------------------------------------------------------------
# adaptation surfaces and identities


def surface_grid(resolution: int, spec: ConstraintSpec | None = None) -> np.ndarray:
    """Rows of (r1/tau1, r2/tau2, lambda0, lambda1, lambda2) over [0, 1]^2.

    The first ratio varies slowest.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    spec = spec or ConstraintSpec(tau=(1.0, 1.0))
    if spec.n != 2:
        raise ValueError("surface_grid needs exactly two constraints")
    axis = np.linspace(0.0, 1.0, resolution)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    ratios = np.column_stack([u.ravel(), v.ravel()])
    tau = np.asarray(spec.tau, dtype=float)
    l0, lam, _, _ = roger_table(ratios * tau, spec.tau)
    return np.column_stack([ratios, l0, lam])


def surface_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("ratio_1,ratio_2,lambda0,lambda_1,lambda_2\n")
    for row in grid.tolist():
        buf.write(",".join(repr(v) for v in row) + "\n")
    return buf.getvalue()


def check_reward_identity(r0_range=(-1.0, 1.0), r1_range=(0.0, 0.99), resolution: int = 100) -> float:
    """Largest gap between the combined single-constraint reward and its closed form."""
    lo, hi = r1_range
    if lo < 0 or hi >= 1:
        raise ValueError("r1_range must lie within [0, 1)")
    r0 = np.linspace(*r0_range, resolution)
    r1 = np.linspace(lo, hi, resolution)
    a, b = np.meshgrid(r0, r1, indexing="ij")
    a, b = a.ravel(), b.ravel()
    l0, lam, _, _ = roger_table(b[:, None], (1.0,))
    combined = combine_table(np.column_stack([a, b]), l0, lam)
    closed = a - a * b ** 2 - b ** 3
    return float(np.max(np.abs(combined - closed)))


def _episode_means(log: TrialLog):
    ep = log.col("episode").astype(int)
    ids, inv = np.unique(ep, return_inverse=True)
    counts = np.bincount(inv).astype(float)
    prim = np.bincount(inv, weights=log.col("primary")) / counts
    pens = np.column_stack([np.bincount(inv, weights=p) / counts for p in log.penalties().T]) \
        if log.n_constraints else np.zeros((ids.size, 0))
    return ids, prim, pens


def _window_means(x: np.ndarray, w: int) -> np.ndarray:
    """Trailing means over ``w`` consecutive entries, one per full window."""
    c = np.cumsum(np.concatenate([np.zeros((1,) + x.shape[1:]), x]), axis=0)
    return (c[w:] - c[:-w]) / w


@dataclass
class LearningInequalityResult:
    fraction: float
    flagged: np.ndarray
    epsilon: float
    trajectory: np.ndarray  # columns: checkpoint episode, window R0, window R1..Rn

    def trajectory_csv(self) -> str:
        n = self.trajectory.shape[1] - 2
        head = ["episode", "r0"] + [f"r{i + 1}" for i in range(n)]
        lines = [",".join(head)]
        for row in self.trajectory.tolist():
            lines.append(",".join([str(int(row[0]))] + [repr(v) for v in row[1:]]))
        return "\n".join(lines) + "\n"


def check_learning_inequality(log: TrialLog, epsilon: float | None = None,
                              window: int | None = None,
                              epsilon_fraction: float = 0.05) -> LearningInequalityResult:
    """Flag checkpoints where the cumulative window-mean R0 gain falls short.

    A checkpoint t' is flagged when R0(t') - R0(t0) < R0(t0) - epsilon. When
    ``epsilon`` is None it is ``epsilon_fraction`` of the observed range of
    the window-mean R0 series.
    """
    w = int(window or log.meta.get("episodes_per_window", 8))
    ids, prim, pens = _episode_means(log)
    if ids.size < w + 1:
        raise ValueError("log too short for two update checkpoints")
    r0 = _window_means(prim, w)
    r1 = _window_means(pens, w)
    if epsilon is None:
        epsilon = epsilon_fraction * float(np.ptp(r0))
    flagged = (r0[1:] - r0[0]) < (r0[0] - epsilon)
    traj = np.column_stack([ids[w - 1:], r0, r1])
    return LearningInequalityResult(float(flagged.mean()), flagged, float(epsilon), traj)


@dataclass
class LyapunovResult:
    status: str  # "ok" or "insufficient data"
    n_events: int
    mean_change: float = float("nan")
    upper_bound: float = float("nan")

    @property
    def holds(self) -> bool:
        return self.status == "ok" and self.upper_bound <= 0


def boundary_changes(log: TrialLog, band: float = 0.95, constraint: int = 0,
                     tau: float | None = None, k_sigma: float | None = None,
                     window: int | None = None) -> np.ndarray:
    """Window-mean penalty change one update after each near-boundary window."""
    meta = log.meta
    w = int(window or meta.get("episodes_per_window", 8))
    tau = float(tau if tau is not None else meta["tau"][constraint])
    k = float(k_sigma if k_sigma is not None else meta.get("k_sigma", 3.0))
    _, _, pens = _episode_means(log)
    p = pens[:, constraint]
    if p.size < w + 1:
        return np.zeros(0)
    windows = np.lib.stride_tricks.sliding_window_view(p, w)
    r_tilde = np.maximum(0.0, windows.mean(axis=1) + k * windows.std(axis=1))
    wmean = windows.mean(axis=1)
    events = np.flatnonzero(r_tilde[:-1] >= band * tau)
    return wmean[events + 1] - wmean[events]


def check_lyapunov_boundary(logs, band: float = 0.95, min_events: int = 100,
                            confidence: float = 0.95, **kw) -> LyapunovResult:
    """Mean near-boundary penalty change with a one-sided upper confidence bound.

    ``logs`` is one TrialLog or a sequence of them; events are pooled.
    """
    if isinstance(logs, TrialLog):
        logs = [logs]
    d = np.concatenate([boundary_changes(lg, band, **kw) for lg in logs]) if logs else np.zeros(0)
    n = d.size
    if n < max(min_events, 2):
        return LyapunovResult("insufficient data", n)
    mean = float(d.mean())
    se = float(d.std(ddof=1)) / math.sqrt(n)
    ub = mean + float(stats.t.ppf(confidence, n - 1)) * se
    return LyapunovResult("ok", n, mean, ub)


# ---------------------------------------------------------------------------
# trial summaries and comparison reports


@dataclass(frozen=True)
class TrialSummary:
    adapter: str
    seed: int
    final_primary: float
    n_steps: int
    violation_steps: int
    p999: tuple[float, ...]
    max_penalty: tuple[float, ...]
    fell: bool

    def to_dict(self) -> dict:
        return {
            "adapter": self.adapter, "seed": self.seed, "final_primary": self.final_primary,
            "n_steps": self.n_steps, "violation_steps": self.violation_steps,
            "p999": list(self.p999), "max_penalty": list(self.max_penalty), "fell": self.fell,
        }


def final_window_primary(log: TrialLog, window: int | None = None) -> float:
    w = int(window or log.meta.get("episodes_per_window", 8))
    _, prim, _ = _episode_means(log)
    if prim.size == 0:
        return float("nan")
    return float(prim[-w:].mean())


def summarize_trial(log: TrialLog, tau, adapter: str = "", seed: int = 0,
                    fall_mask: np.ndarray | None = None) -> TrialSummary:
    pens = log.penalties()
    tau = np.asarray(tau, dtype=float)
    n = len(log)
    viol = int(np.any(pens > tau, axis=1).sum()) if n else 0
    p999 = tuple(percentile(pens[:, i], 99.9) if n else 0.0 for i in range(pens.shape[1]))
    mx = tuple(float(pens[:, i].max()) if n else 0.0 for i in range(pens.shape[1]))
    fell = bool(np.any(fall_mask)) if fall_mask is not None else False
    return TrialSummary(adapter, int(seed), final_window_primary(log), n, viol, p999, mx, fell)


@dataclass
class ComparisonReport:
    adapters: list[str]
    per_adapter: dict[str, dict]
    pairwise: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"adapters": self.adapters, "per_adapter": self.per_adapter,
                "pairwise": self.pairwise, "notes": self.notes}


def compare_summaries(groups: dict[str, list[TrialSummary]],
                      penalty_samples: dict[str, np.ndarray] | None = None,
                      tau=None) -> ComparisonReport:
    """Aggregate per-seed summaries into a report with pairwise tests.

    ``groups`` maps adapter label to its summaries. ``penalty_samples``
    optionally maps label to pooled penalty samples (steps x constraints) for
    the KDE tail estimate.
    """
    labels = list(groups)
    per = {}
    notes = []
    for lab in labels:
        rows = sorted(groups[lab], key=lambda s: s.seed)
        fin = np.array([s.final_primary for s in rows])
        steps = sum(s.n_steps for s in rows)
        viol = sum(s.violation_steps for s in rows)
        entry = {
            "seeds": [s.seed for s in rows],
            "final_primary_mean": float(fin.mean()) if fin.size else float("nan"),
            "final_primary_std": float(fin.std()) if fin.size else float("nan"),
            "violation_steps": int(viol),
            "steps": int(steps),
            "violation_fraction": viol / steps if steps else 0.0,
            "p999": [float(max(s.p999[i] for s in rows)) for i in range(len(rows[0].p999))] if rows else [],
            "p999_mean": [float(np.mean([s.p999[i] for s in rows])) for i in range(len(rows[0].p999))] if rows else [],
            "falls": int(sum(s.fell for s in rows)),
        }
        if penalty_samples is not None and tau is not None and lab in penalty_samples:
            samp = np.asarray(penalty_samples[lab], dtype=float)
            entry["kde_violation"] = [kde_tail_probability(samp[:, i], t) for i, t in enumerate(tau)]
        per[lab] = entry
        if len(rows) < 2:
            notes.append(f"{lab}: fewer than two seeds, tests are low-power")
    pairs = []
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            fa = [s.final_primary for s in groups[a]]
            fb = [s.final_primary for s in groups[b]]
            t_p = welch_t_test(fa, fb) if len(fa) >= 2 and len(fb) >= 2 else None
            pa, pb = per[a], per[b]
            prop_p = two_proportion_test(pa["violation_steps"], max(pa["steps"], 1),
                                         pb["violation_steps"], max(pb["steps"], 1))
            pairs.append({"a": a, "b": b, "t_test_p": t_p, "two_proportion_p": prop_p,
                          "low_power": t_p is None})
    return ComparisonReport(labels, per, pairs, notes)
