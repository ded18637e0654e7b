"""Experiment configuration, seeded trials, comparisons and sweeps."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import ComparisonReport, TrialSummary, compare_summaries, summarize_trial
from .core import AdapterKind, AdapterState, ConfigError, ConstraintSpec
from .envs import ENV_CONFIGS, make_env
from .learner import (
    LearnerConfig,
    PolicyState,
    TrajectoryBuffer,
    TrialDiverged,
    explore,
    run_episode,
)
from .triallog import TrialLog, log_columns

log = logging.getLogger(__name__)

# Stream ids for np.random.default_rng([seed, episode, stream]).
EXPLORE_STREAM = 0
RESET_STREAM = 1

# Per-environment learner defaults. Explicit "learner" entries in a config
# override these field by field.
LEARNER_DEFAULTS = {
    "landscape": dict(eta_theta=2e-4, eta_sigma=1e-6, timesteps_per_episode=1, return_horizon=1,
                      sigma_init=0.05, sigma_min=1e-3),
    "cart": dict(eta_theta=1e-6, eta_sigma=1e-8, timesteps_per_episode=70, return_horizon=20,
                 sigma_init=0.05, sigma_min=1e-3),
}

_CONSTRAINT_KEYS = ("delta", "k_sigma", "estimator_sign", "estimator_base")
_ADAPTER_KEYS = ("fixed_gains", "eta_lambda", "dual_init")


class BudgetExceeded(ConfigError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "landscape"
    env_params: dict = field(default_factory=dict)
    adapter: str = "ROGER"
    adapter_params: dict = field(default_factory=dict)
    constraint: dict = field(default_factory=dict)
    learner: dict = field(default_factory=dict)
    episodes: int = 500
    seeds: tuple = tuple(range(10))
    label: str = ""
    out_dir: Optional[str] = None

    # -- construction ----------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "must be a mapping")
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        d = copy.deepcopy(d)
        if "seeds" in d:
            seeds = d["seeds"]
            if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise ConfigError("seeds", "must be a list of non-negative integers")
            d["seeds"] = tuple(seeds)
        for k in ("env_params", "adapter_params", "constraint", "learner"):
            if k in d and not isinstance(d[k], dict):
                raise ConfigError(k, "must be a mapping")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_json(path))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.adapter_params.get("fixed_gains") is not None:
            g = self.adapter_params["fixed_gains"]
            return f"{self.adapter}[{','.join(map(str, np.atleast_1d(g).tolist()))}]"
        return self.adapter

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        d.pop("seeds", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- materialisation -------------------------------------------------

    def learner_config(self) -> LearnerConfig:
        if self.env not in LEARNER_DEFAULTS:
            raise ConfigError("env", f"unknown environment {self.env!r}")
        params = dict(LEARNER_DEFAULTS[self.env])
        for k in self.learner:
            if k not in LearnerConfig.__dataclass_fields__:
                raise ConfigError(f"learner.{k}", "unknown field")
        params.update(self.learner)
        return LearnerConfig(**params)

    def build(self):
        """Validate and return ``(env, spec, adapter, learner_config)``."""
        if self.episodes < 0:
            raise ConfigError("episodes", "must be >= 0")
        env = make_env(self.env, **self.env_params)
        for k in self.constraint:
            if k not in _CONSTRAINT_KEYS:
                raise ConfigError(f"constraint.{k}", "unknown field")
        cons = {k: tuple(v) if isinstance(v, list) else v for k, v in self.constraint.items()}
        spec = env.constraint_spec(**cons)
        try:
            kind = AdapterKind(self.adapter)
        except ValueError:
            raise ConfigError("adapter", f"unknown adapter {self.adapter!r}") from None
        for k in self.adapter_params:
            if k not in _ADAPTER_KEYS:
                raise ConfigError(f"adapter_params.{k}", "unknown field")
        adapter = AdapterState.create(kind, spec.n, **self.adapter_params)
        lc = self.learner_config()
        if env.episode_length != lc.timesteps_per_episode and self.env == "cart":
            lc = replace(lc, timesteps_per_episode=env.episode_length,
                         return_horizon=min(lc.return_horizon, env.episode_length))
        return env, spec, adapter, lc

    def validate(self) -> None:
        self.build()


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# single trial


@dataclass
class TrialResult:
    config: ExperimentConfig
    seed: int
    log: TrialLog
    summary: TrialSummary
    status: str = "ok"          # "ok" or "diverged"
    error: str = ""
    update_seconds: float = 0.0

    def manifest_entry(self) -> dict:
        return {
            "label": self.config.name, "config_hash": self.config.config_hash(), "seed": self.seed,
            "status": self.status, "error": self.error, "summary": self.summary.to_dict(),
            "mean_gain_update_ms": 1e3 * self.update_seconds,
        }


def trial_rngs(seed: int, episode: int):
    return (np.random.default_rng([seed, episode, EXPLORE_STREAM]),
            np.random.default_rng([seed, episode, RESET_STREAM]))


def run_trial(cfg: ExperimentConfig, seed: int, out_dir=None, fmt: str = "csv") -> TrialResult:
    """Run one seeded trial. The log is flushed even when the trial diverges."""
    env, spec, adapter, lc = cfg.build()
    columns = log_columns(env.state_names, spec.n)
    meta = {
        "config_hash": cfg.config_hash(), "seed": int(seed), "adapter": cfg.adapter, "env": cfg.env,
        "label": cfg.name, "tau": list(spec.tau), "k_sigma": spec.k_sigma,
        "episodes_per_window": lc.episodes_per_window,
    }
    scale = _param_scale(env)
    lc = replace(lc, sigma_min=lc.sigma_min * scale)
    policy = PolicyState.initial(env.initial_theta(), lc.sigma_init * scale)
    buffer = TrajectoryBuffer(lc.episodes_per_window)
    directions = None
    rows = []
    status, error = "ok", ""
    spent, n_gain = 0.0, 0
    fall_mask = []
    for e in range(cfg.episodes):
        rng_explore, rng_reset = trial_rngs(seed, e)
        env.reset(rng_reset)
        policy = explore(policy, rng_explore)
        t0 = time.perf_counter()
        try:
            res = run_episode(env, policy, adapter, buffer, spec, lc, e, directions)
        except TrialDiverged as exc:
            status, error = "diverged", str(exc)
            break
        spent += time.perf_counter() - t0
        n_gain += 1
        policy, adapter, directions = res.policy, res.adapter, res.directions
        if res.rows.size:
            rows.append(res.rows)
            fall_mask.append(env.is_failure(res.rows[:, 2:2 + len(env.state_names)]))
    trial_log = TrialLog.from_rows(columns, rows, meta)
    mask = np.concatenate(fall_mask) if fall_mask else np.zeros(0, dtype=bool)
    summary = summarize_trial(trial_log, spec.tau, cfg.name, seed, mask)
    result = TrialResult(cfg, int(seed), trial_log, summary, status, error,
                         spent / n_gain if n_gain else 0.0)
    if out_dir is not None:
        write_trial(result, out_dir, fmt)
    return result


def _param_scale(env) -> float:
    return float(getattr(env.cfg, "param_scale", 1.0))


def trial_filename(cfg: ExperimentConfig, seed: int, fmt: str = "csv") -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in cfg.name)
    return f"{safe}_{cfg.config_hash()[:8]}_seed{seed}.{fmt}"


def write_trial(result: TrialResult, out_dir, fmt: str = "csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / trial_filename(result.config, result.seed, fmt)
    if fmt == "csv":
        result.log.to_csv(path)
    elif fmt == "jsonl":
        result.log.to_jsonl(path)
    else:
        raise ConfigError("format", f"unknown format {fmt!r}")
    with open(out / "manifest.jsonl", "a") as fh:
        entry = result.manifest_entry()
        entry["log"] = path.name
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# comparisons


@dataclass
class _Outcome:
    key: tuple
    summary: Optional[TrialSummary]
    penalties: Optional[np.ndarray]
    status: str
    error: str


def _trial_task(args) -> _Outcome:
    key, cfg_dict, seed, out_dir, fmt = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        res = run_trial(cfg, seed, out_dir, fmt)
    except Exception as exc:  # one failing trial must not take down its siblings
        return _Outcome(key, None, None, "error", f"{type(exc).__name__}: {exc}")
    return _Outcome(key, res.summary, res.log.penalties(), res.status, res.error)


def _run_tasks(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        out = [_trial_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_trial_task, tasks, chunksize=1))
    return sorted(out, key=lambda o: o.key)


def run_compare(cfgs, jobs: int = 1, out_dir=None, fmt: str = "csv", seeds=None) -> ComparisonReport:
    """Run every config over the shared seed list and build a comparison report."""
    cfgs = list(cfgs)
    if len(cfgs) < 2:
        raise ConfigError("adapters", "compare needs at least two configurations")
    if len({c.env for c in cfgs}) != 1:
        raise ConfigError("env", "compared configurations must share the environment")
    for c in cfgs:
        c.validate()
    seeds = list(seeds if seeds is not None else cfgs[0].seeds)
    labels = _unique_labels(cfgs)
    tasks = [((i, s), c.to_dict(), s, out_dir, fmt) for i, c in enumerate(cfgs) for s in seeds]
    outcomes = _run_tasks(tasks, jobs)
    groups = {lab: [] for lab in labels}
    samples = {lab: [] for lab in labels}
    notes = []
    for o in outcomes:
        lab = labels[o.key[0]]
        if o.summary is None:
            notes.append(f"{lab} seed {o.key[1]}: {o.error}")
            continue
        if o.status != "ok":
            notes.append(f"{lab} seed {o.key[1]}: {o.status} ({o.error})")
        groups[lab].append(o.summary)
        samples[lab].append(o.penalties)
    tau = cfgs[0].build()[1].tau
    pooled = {lab: np.vstack(v) for lab, v in samples.items() if v}
    report = compare_summaries({k: v for k, v in groups.items() if v}, pooled, tau)
    report.notes = notes + report.notes
    for lab in labels:
        if not groups[lab]:
            report.notes.append(f"{lab}: no successful trials")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(report_json(report))
    return report


def report_json(report: ComparisonReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"


def _unique_labels(cfgs):
    labels = []
    for c in cfgs:
        lab = c.name
        k = 2
        while lab in labels:
            lab = f"{c.name}#{k}"
            k += 1
        labels.append(lab)
    return labels


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    axes: dict
    repetitions: int = 10
    budget: int = 2000

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        for k in d:
            if k not in ("base", "axes", "repetitions", "budget"):
                raise ConfigError(k, "unknown field")
        axes = d.get("axes", {})
        if not isinstance(axes, dict) or not all(isinstance(v, list) and v for v in axes.values()):
            raise ConfigError("axes", "must map dotted names to non-empty lists")
        return cls(ExperimentConfig.from_dict(d.get("base", {})), axes,
                   int(d.get("repetitions", 10)), int(d.get("budget", 2000)))

    def cells(self):
        names = list(self.axes)
        for values in itertools.product(*(self.axes[n] for n in names)):
            yield dict(zip(names, values))

    @property
    def n_cells(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()])) if self.axes else 1


def apply_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    head, _, rest = dotted.partition(".")
    if head not in ExperimentConfig.__dataclass_fields__:
        raise ConfigError(dotted, "unknown sweep axis")
    if not rest:
        return replace(cfg, **{head: value})
    current = getattr(cfg, head)
    if not isinstance(current, dict):
        raise ConfigError(dotted, "only mapping fields take dotted sub-keys")
    updated = dict(current)
    updated[rest] = value
    return replace(cfg, **{head: updated})


SWEEP_COLUMNS = ["final_primary_mean", "final_primary_max", "violation_fraction", "p999_mean", "p999_max",
                 "falls", "errors", "failure"]


def run_sweep(spec: SweepSpec, jobs: int = 1, out_dir=None, fmt: str = "csv") -> list[dict]:
    """One row per grid cell, in grid order. Refuses to start over budget."""
    total = spec.n_cells * spec.repetitions
    if total > spec.budget:
        raise BudgetExceeded("budget", f"{total} trials requested, budget is {spec.budget}")
    if spec.repetitions < 1:
        raise ConfigError("repetitions", "must be >= 1")
    seeds = list(spec.base.seeds[:spec.repetitions])
    seeds += list(range(max(seeds, default=-1) + 1, max(seeds, default=-1) + 1 + spec.repetitions - len(seeds)))
    cells = list(spec.cells())
    cfgs = []
    for cell in cells:
        c = spec.base
        for k, v in cell.items():
            c = apply_override(c, k, v)
        c.validate()
        cfgs.append(c)
    tasks = [((i, s), c.to_dict(), s, out_dir, fmt) for i, c in enumerate(cfgs) for s in seeds]
    outcomes = _run_tasks(tasks, jobs)
    table = []
    for i, cell in enumerate(cells):
        outs = [o for o in outcomes if o.key[0] == i]
        ok = [o.summary for o in outs if o.summary is not None]
        fin = np.array([s.final_primary for s in ok]) if ok else np.array([np.nan])
        steps = sum(s.n_steps for s in ok)
        p999 = np.array([s.p999 for s in ok]) if ok else np.zeros((1, 0))
        falls = sum(s.fell for s in ok)
        errors = len(outs) - len(ok) + sum(o.status != "ok" for o in outs if o.summary is not None)
        row = dict(cell)
        row.update({
            "final_primary_mean": float(np.mean(fin)), "final_primary_max": float(np.max(fin)),
            "violation_fraction": sum(s.violation_steps for s in ok) / steps if steps else 0.0,
            "p999_mean": p999.mean(axis=0).tolist(), "p999_max": p999.max(axis=0).tolist(),
            "falls": int(falls), "errors": int(errors), "failure": bool(falls or errors),
        })
        table.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(sweep_csv(table, list(spec.axes)))
    return table


def sweep_csv(table, axis_names) -> str:
    head = list(axis_names) + SWEEP_COLUMNS
    lines = [",".join(head)]
    for row in table:
        vals = []
        for k in head:
            v = row[k]
            if isinstance(v, list):
                v = ";".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            vals.append(str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
