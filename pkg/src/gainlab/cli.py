"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime divergence.
Errors go to stderr, a JSON summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .core import ConfigError, ConstraintSpec
from .harness import ExperimentConfig, SweepSpec, load_json, report_json, run_compare, run_sweep, run_trial, sweep_csv
from .triallog import TrialLog

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gainlab", description="Adaptive reward-gain experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON configuration document")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="max concurrent trials")
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    run = sub.add_parser("run", help="run a single trial")
    common(run)
    run.add_argument("--seed", type=int)

    cmp_ = sub.add_parser("compare", help="compare adapters over shared seeds")
    common(cmp_)

    sw = sub.add_parser("sweep", help="grid sweep over config axes")
    common(sw)

    sf = sub.add_parser("surface", help="gain adaptation surface grid as CSV")
    sf.add_argument("--resolution", type=int, default=101)
    sf.add_argument("--tau", type=float, nargs=2, default=(1.0, 1.0))
    sf.add_argument("--out", help="CSV path; stdout when omitted")

    an = sub.add_parser("analyze", help="post-hoc checks on existing trial logs")
    an.add_argument("logs", nargs="+")
    an.add_argument("--epsilon", type=float, help="learning-inequality tolerance (default 5%% of range)")
    an.add_argument("--band", type=float, default=0.95)

    va = sub.add_parser("validate", help="check a configuration without running it")
    va.add_argument("--config", required=True)
    return p


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    seed = args.seed if args.seed is not None else (cfg.seeds[0] if cfg.seeds else 0)
    res = run_trial(cfg, seed, args.out or cfg.out_dir, args.format)
    _emit(res.manifest_entry())
    if res.status != "ok":
        print(f"error: trial diverged: {res.error}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _compare_configs(doc):
    """``{"base": {...}, "adapters": [{...}, ...]}`` or a plain list of configs."""
    if isinstance(doc, list):
        return [ExperimentConfig.from_dict(d) for d in doc]
    if not isinstance(doc, dict) or "adapters" not in doc:
        raise ConfigError("adapters", "compare config needs an 'adapters' list")
    base = doc.get("base", {})
    out = []
    for over in doc["adapters"]:
        d = json.loads(json.dumps(base))
        for k, v in over.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        out.append(ExperimentConfig.from_dict(d))
    return out


def _cmd_compare(args) -> int:
    cfgs = _compare_configs(load_json(args.config))
    report = run_compare(cfgs, jobs=args.jobs, out_dir=args.out, fmt=args.format)
    sys.stdout.write(report_json(report))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(load_json(args.config))
    table = run_sweep(spec, jobs=args.jobs, out_dir=args.out, fmt=args.format)
    _emit({"cells": len(table), "failure_cells": sum(r["failure"] for r in table), "table": table})
    if not args.out:
        sys.stderr.write(sweep_csv(table, list(spec.axes)))
    return EXIT_OK


def _cmd_surface(args) -> int:
    spec = ConstraintSpec(tau=tuple(args.tau))
    text = analysis.surface_csv(analysis.surface_grid(args.resolution, spec))
    if args.out:
        Path(args.out).write_text(text)
        _emit({"rows": args.resolution ** 2, "path": args.out})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_analyze(args) -> int:
    logs = [TrialLog.read(p) for p in args.logs]
    out = {"reward_identity_max_dev": analysis.check_reward_identity(), "logs": []}
    for path, lg in zip(args.logs, logs):
        entry = {"path": path, "rows": len(lg)}
        if lg.n_constraints and len(lg):
            tau = lg.meta.get("tau")
            pens = lg.penalties()
            entry["p999"] = [analysis.percentile(pens[:, i], 99.9) for i in range(pens.shape[1])]
            if tau:
                entry["kde_violation"] = [analysis.kde_tail_probability(pens[:, i], t) for i, t in enumerate(tau)]
                entry["empirical_violation"] = [float(np.mean(pens[:, i] > t)) for i, t in enumerate(tau)]
        try:
            li = analysis.check_learning_inequality(lg, args.epsilon)
            entry["learning_inequality_fraction"] = li.fraction
            entry["learning_inequality_epsilon"] = li.epsilon
        except ValueError as exc:
            entry["learning_inequality_fraction"] = None
            entry["learning_inequality_note"] = str(exc)
        if lg.meta.get("tau"):
            ly = analysis.check_lyapunov_boundary(lg, args.band)
            entry["lyapunov"] = {"status": ly.status, "events": ly.n_events,
                                 "mean_change": ly.mean_change, "upper_bound": ly.upper_bound}
        out["logs"].append(entry)
    if len(logs) > 1 and all(lg.meta.get("tau") for lg in logs):
        ly = analysis.check_lyapunov_boundary(logs, args.band)
        out["lyapunov_pooled"] = {"status": ly.status, "events": ly.n_events,
                                  "mean_change": ly.mean_change, "upper_bound": ly.upper_bound}
    _emit(json.loads(json.dumps(out, default=float).replace("NaN", "null")))
    return EXIT_OK


def _cmd_validate(args) -> int:
    doc = load_json(args.config)
    if isinstance(doc, dict) and "axes" in doc:
        SweepSpec.from_dict(doc).base.validate()
    elif isinstance(doc, list) or (isinstance(doc, dict) and "adapters" in doc):
        for c in _compare_configs(doc):
            c.validate()
    else:
        ExperimentConfig.from_dict(doc).validate()
    _emit({"valid": True})
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "sweep": _cmd_sweep, "surface": _cmd_surface,
            "analyze": _cmd_analyze, "validate": _cmd_validate}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _emit({"valid": False, "field": exc.field, "error": str(exc)})
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
