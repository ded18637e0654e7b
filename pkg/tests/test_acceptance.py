"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py`` or directly as a script.
"""

from __future__ import annotations

import functools
import json
import math
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import stats

from gainlab.analysis import (
    check_learning_inequality,
    check_lyapunov_boundary,
    check_reward_identity,
    kde_tail_probability,
    percentile,
    surface_grid,
    two_proportion_test,
    welch_t_test,
)
from gainlab.core import (
    AdapterState,
    ConstraintSpec,
    PenaltyEstimate,
    cbf_transform,
    crpo_gains,
    olaux_update,
    pdo_update,
    roger_gains,
    roger_table,
)
from gainlab.harness import ExperimentConfig, SweepSpec, run_sweep, run_trial

SEEDS = tuple(range(20))
EPISODES = 500
FIXED_SWEEP = (0.1, 1.0, 10.0)


def _line(n: int, ok: bool, detail: str) -> str:
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


# ---------------------------------------------------------------------------
# cached benchmark runs


@functools.lru_cache(maxsize=None)
def landscape_runs(adapter: str, gain: float | None = None):
    params = {"fixed_gains": gain} if gain is not None else {}
    cfg = ExperimentConfig(env="landscape", adapter=adapter, adapter_params=params, episodes=EPISODES)
    return [run_trial(cfg, s) for s in SEEDS]


@functools.lru_cache(maxsize=None)
def cart_runs(adapter: str):
    cfg = ExperimentConfig(env="cart", adapter=adapter, episodes=EPISODES)
    return [run_trial(cfg, s) for s in SEEDS]


def _violation(runs):
    k = sum(r.summary.violation_steps for r in runs)
    n = sum(r.summary.n_steps for r in runs)
    return k, n


def _final(runs):
    return np.array([r.summary.final_primary for r in runs])


# ---------------------------------------------------------------------------
# criteria


def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_sum = worst_small = worst_sat = 0.0
    n_small = n_sat = 0
    per_n = 25_000
    for n in (1, 2, 3, 5):
        tau = rng.uniform(0.01, 3.0, (per_n, n))
        # mix ratios below, near and above the saturation boundary
        scale = np.array([0.2, 0.6, 1.0, 3.0])[np.arange(per_n) % 4][:, None]
        r = tau * rng.uniform(0, 1, (per_n, n)) * scale
        l0, lam, _, _ = roger_table(r, tau)
        sq = (r / tau) ** 2
        s = sq.sum(axis=1)
        worst_sum = max(worst_sum, float(np.max(np.abs(l0 + lam.sum(axis=1) - 1))))
        small, sat = s <= 1, s >= 1
        n_small += int(small.sum())
        n_sat += int(sat.sum())
        worst_small = max(worst_small, float(np.max(np.abs(lam[small] - sq[small]), initial=0.0)))
        worst_sat = max(worst_sat, float(np.max(np.abs(l0[sat]), initial=0.0)))
        # the per-case entry point must agree with the table
        for i in range(0, per_n, 97):
            g = roger_gains(PenaltyEstimate(r[i], 1), ConstraintSpec(tau=tuple(tau[i])))
            worst_sum = max(worst_sum, abs(g.lambda0 - l0[i]), float(np.max(np.abs(g.lam - lam[i]))))
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and worst_small <= 1e-12 and worst_sat <= 1e-12 and dt < 5
    return ok, (f"simplex {worst_sum:.1e}, unsaturated {worst_small:.1e} ({n_small} cases), "
                f"saturated lambda0 {worst_sat:.1e} ({n_sat} cases), {dt:.2f}s")


def criterion_2():
    t0 = time.perf_counter()
    checks = {}
    spec = ConstraintSpec(tau=(0.2,))
    pdo = AdapterState.create("PDO", 1, eta_lambda=0.1, dual_init=0.5)
    _, g = pdo_update(pdo, PenaltyEstimate(np.array([0.25]), 8), spec)
    checks["pdo"] = abs(g.lam[0] - 0.505) < 1e-12 and g.lambda0 == 1.0
    pdo = AdapterState.create("PDO", 1, eta_lambda=0.1, dual_init=0.01)
    _, g = pdo_update(pdo, PenaltyEstimate(np.array([0.0]), 8), spec)
    checks["pdo_clip"] = g.lam[0] == 0.0
    spec2 = ConstraintSpec(tau=(0.2, 0.2), delta=(0.02, 0.02))
    g = crpo_gains(PenaltyEstimate(np.array([0.1, 0.25]), 8), spec2)
    checks["crpo_switch"] = g.lambda0 == 0.0 and g.lam.tolist() == [0.0, 1.0]
    g = crpo_gains(PenaltyEstimate(np.array([0.1]), 8), ConstraintSpec(tau=(0.2,), delta=(0.02,)))
    checks["crpo_safe"] = g.lambda0 == 1.0 and g.lam.tolist() == [0.0]
    ol = AdapterState.create("OLAUX", 1, eta_lambda=0.1, dual_init=0.2)
    _, g = olaux_update(ol, [1.0, 0.0], [[0.5, 3.0]])
    checks["olaux"] = abs(g.lam[0] - 0.25) < 1e-12
    ol = AdapterState.create("OLAUX", 1, eta_lambda=0.1, dual_init=0.01)
    _, g = olaux_update(ol, [1.0], [[-1.0]])
    checks["olaux_clip"] = g.lam[0] == 0.0
    checks["qcbf"] = abs(cbf_transform(0.3, 0.25, 0.05, "QuadCBF") - 0.05) < 1e-15
    checks["qcbf_clip"] = cbf_transform(0.1, 0.25, 0.05, "QuadCBF") == 0.0
    checks["lncbf"] = abs(cbf_transform(0.4, 0.25, 0.05, "LogCBF") - math.log(2) ** 2) < 1e-15
    checks["lncbf_clip"] = cbf_transform(0.2, 0.25, 0.05, "LogCBF") == 0.0
    dt = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    return not bad and dt < 1, f"{len(checks) - len(bad)}/{len(checks)} examples, {dt * 1e3:.1f}ms" + (
        f", failing {bad}" if bad else "")


def criterion_3():
    t0 = time.perf_counter()
    dev = check_reward_identity((-1.0, 1.0), (0.0, 0.99), 100)
    dt = time.perf_counter() - t0
    return dev <= 1e-12 and dt < 1, f"max deviation {dev:.1e}, {dt * 1e3:.1f}ms"


def criterion_4():
    g = surface_grid(101, ConstraintSpec(tau=(1.0, 1.0)))
    u, v = g[:, 0], g[:, 1]
    s = u ** 2 + v ** 2
    d = np.minimum(s, 1.0)
    safe = np.where(s > 0, s, 1.0)
    closed = np.column_stack([1 - d, np.where(s > 0, u ** 2 / safe * d, 0), np.where(s > 0, v ** 2 / safe * d, 0)])
    simplex = float(np.max(np.abs(g[:, 2:].sum(axis=1) - 1)))
    form = float(np.max(np.abs(g[:, 2:] - closed)))
    return simplex <= 1e-12 and form <= 1e-12 and g.shape[0] == 101 ** 2, (
        f"simplex {simplex:.1e}, closed form {form:.1e} over {g.shape[0]} points")


def strong_fixed_gain():
    """Highest-reward gain of the sweep among gains as safe as the ROGER bar."""
    rows = []
    for gain in FIXED_SWEEP:
        runs = landscape_runs("FixedPenalty", gain)
        k, n = _violation(runs)
        rows.append((gain, k / n, float(_final(runs).mean())))
    safe = [r for r in rows if r[1] < 0.005]
    if not safe:
        return None, rows
    return max(safe, key=lambda r: r[2])[0], rows


def criterion_5():
    t0 = time.perf_counter()
    roger, crpo, primary = landscape_runs("ROGER"), landscape_runs("CRPO"), landscape_runs("PrimaryOnly")
    kr, nr = _violation(roger)
    kc, nc = _violation(crpo)
    kp, np_ = _violation(primary)
    p_prop = two_proportion_test(kr, nr, kp, np_)
    gain, sweep = strong_fixed_gain()
    if gain is None:
        p_t, fp_mean = float("nan"), float("nan")
    else:
        fp = _final(landscape_runs("FixedPenalty", gain))
        p_t = welch_t_test(_final(roger), fp, alternative="greater")
        fp_mean = float(fp.mean())
    dt = time.perf_counter() - t0
    ok = (kr / nr < 0.005 and kc / nc < 0.02 and kp / np_ > 0.10 and p_prop < 0.01
          and gain is not None and _final(roger).mean() >= fp_mean and p_t < 0.05 and dt < 300)
    sweep_txt = ", ".join(f"{g:g}:{v:.4f}/{r:.3f}" for g, v, r in sweep)
    return ok, (f"viol ROGER {kr / nr:.4f} CRPO {kc / nc:.4f} PrimaryOnly {kp / np_:.4f} (p={p_prop:.1e}); "
                f"final R0 ROGER {_final(roger).mean():.3f} vs fixed[{gain}] {fp_mean:.3f} (one-sided p={p_t:.1e}); "
                f"sweep gain:viol/R0 {sweep_txt}; {dt:.0f}s")


def criterion_6():
    t0 = time.perf_counter()
    roger, primary = cart_runs("ROGER"), cart_runs("PrimaryOnly")
    tau = 0.2
    tr = np.concatenate([r.log.penalties()[:, 0] for r in roger])
    tp = np.concatenate([r.log.penalties()[:, 0] for r in primary])
    q_r, q_p = percentile(tr, 99.9), percentile(tp, 99.9)
    falls = int(np.sum(tr >= math.pi / 4))
    dt = time.perf_counter() - t0
    ok = q_r <= 1.05 * tau and falls == 0 and q_p > tau and dt < 600
    return ok, (f"ROGER p99.9 |tilt| {q_r:.4f} (limit {1.05 * tau:.3f}), fall steps {falls}; "
                f"PrimaryOnly p99.9 {q_p:.4f}; {dt:.0f}s")


def criterion_7():
    base = ExperimentConfig(env="cart", adapter="ROGER", episodes=EPISODES)
    table = run_sweep(SweepSpec(base, {"env_params.tau_tilt": [0.1, 0.2, 0.3]}, repetitions=10))
    fails = [r["env_params.tau_tilt"] for r in table if r["failure"]]
    detail = ", ".join(f"tau={r['env_params.tau_tilt']}: p99.9 max {r['p999_max'][0]:.3f} falls {r['falls']}"
                       for r in table)
    return not fails, f"failure cells {fails or 'none'}; {detail}"


def criterion_8():
    fr = [check_learning_inequality(r.log).fraction for r in landscape_runs("ROGER")]
    worst = max(fr)
    pooled = float(np.mean(fr))
    return worst <= 0.01, f"flagged checkpoint fraction: worst seed {worst:.4f}, mean {pooled:.4f}"


def criterion_9():
    res = check_lyapunov_boundary([r.log for r in landscape_runs("ROGER")], band=0.95)
    return res.holds, (f"{res.status}: {res.n_events} near-boundary events, mean change {res.mean_change:.4f}, "
                       f"95% upper bound {res.upper_bound:.4f}")


def criterion_10():
    from statsmodels.stats.proportion import proportions_ztest

    x = np.random.default_rng(7).standard_normal(100_000)
    kde = kde_tail_probability(x, 1.6449)
    ref = float(stats.norm.sf(1.6449))
    ok_kde = abs(kde - ref) <= 0.005

    rng = np.random.default_rng(4)
    a, b = rng.normal(0, 1, 50), rng.normal(2, 1, 50)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p_ref = 2 * stats.t.sf(abs(t), df)
    p = welch_t_test(a, b)
    ok_welch = math.isclose(p, p_ref, rel_tol=1e-9) and p < 1e-6 and welch_t_test(a, a) == 1.0

    _, pz = proportions_ztest([50, 10], [100, 100])
    pt = two_proportion_test(50, 100, 10, 100)
    ok_prop = (math.isclose(pt, pz, rel_tol=1e-9) and pt < 1e-8
               and two_proportion_test(0, 10, 0, 12) == 1.0
               and abs(two_proportion_test(30, 100, 30, 100) - 1) < 1e-9)
    ok = ok_kde and ok_welch and ok_prop
    return ok, f"KDE tail {kde:.5f} vs {ref:.5f}; Welch p {p:.3e} vs {p_ref:.3e}; two-proportion p {pt:.3e} vs {pz:.3e}"


def _cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "gainlab.cli", *args], capture_output=True, text=True, cwd=cwd)


def criterion_11():
    cfg = ExperimentConfig(env="cart", adapter="ROGER", episodes=40)
    same_trial = run_trial(cfg, 3).log.to_csv() == run_trial(cfg, 3).log.to_csv()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        doc = {"base": {"env": "landscape", "episodes": 60, "seeds": list(range(6))},
               "adapters": [{"adapter": "ROGER"}, {"adapter": "PrimaryOnly"}, {"adapter": "CRPO"},
                            {"adapter": "FixedPenalty", "adapter_params": {"fixed_gains": 1.0}}]}
        (tmp / "cmp.json").write_text(json.dumps(doc))
        r1 = _cli("compare", "--config", str(tmp / "cmp.json"), "--jobs", "1", "--out", str(tmp / "j1"))
        r8 = _cli("compare", "--config", str(tmp / "cmp.json"), "--jobs", "8", "--out", str(tmp / "j8"))
        rep_same = (r1.returncode == 0 and r8.returncode == 0
                    and (tmp / "j1" / "report.json").read_bytes() == (tmp / "j8" / "report.json").read_bytes())
        logs1 = sorted(p.name for p in (tmp / "j1").glob("*.csv"))
        logs_same = bool(logs1) and all((tmp / "j1" / n).read_bytes() == (tmp / "j8" / n).read_bytes() for n in logs1)
    ok = same_trial and rep_same and logs_same
    return ok, f"rerun byte-identical {same_trial}; jobs 1 vs 8 report identical {rep_same}, {len(logs1)} logs identical {logs_same}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


def _check(n: int, capsys):
    ok, detail = CRITERIA[n - 1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, detail))
    assert ok, detail


def test_criterion_01_gain_identities(capsys):
    _check(1, capsys)


def test_criterion_02_baseline_formulas(capsys):
    _check(2, capsys)


def test_criterion_03_reward_identity(capsys):
    _check(3, capsys)


def test_criterion_04_adaptation_surfaces(capsys):
    _check(4, capsys)


def test_criterion_05_landscape_ordering(capsys):
    _check(5, capsys)


def test_criterion_06_cart_tilt_safety(capsys):
    _check(6, capsys)


def test_criterion_07_tau_sweep_robustness(capsys):
    _check(7, capsys)


def test_criterion_08_learning_inequality(capsys):
    _check(8, capsys)


def test_criterion_09_lyapunov_monitor(capsys):
    _check(9, capsys)


def test_criterion_10_statistics_oracles(capsys):
    _check(10, capsys)


def test_criterion_11_determinism_and_parallel_equivalence(capsys):
    _check(11, capsys)


if __name__ == "__main__":
    failed = 0
    for i, fn in enumerate(CRITERIA, start=1):
        ok, detail = fn()
        print(_line(i, ok, detail), flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
