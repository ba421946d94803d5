"""Command-line entry points.

    splitlab run --config cfg.ini --seed 3 --out results/
    splitlab ablate --suite {rl|loss|calibration|theorems} --out results/
    splitlab trace gen --kind congested --seed 3 --out trace.csv
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness, suites, system
from .rlenv import calibrate_rule_thresholds, record_uncertainty_pools, \
    train_split_policy


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    policy = thresholds = None
    if cfg.policy == "rl":
        print(f"training split policy (seed {cfg.seed})...")
        policy = train_split_policy(cfg, cfg.seed)
    elif cfg.policy == "rule":
        print(f"calibrating rule thresholds (seed {cfg.seed})...")
        thresholds = calibrate_rule_thresholds(cfg, cfg.seed)
    rows, summary, _ = harness.run_experiment(cfg, policy_params=policy,
                                              rule_thresholds=thresholds)
    os.makedirs(args.out, exist_ok=True)
    harness.write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    harness.write_summary_csv(summary.as_dict(),
                              os.path.join(args.out, "summary.csv"))
    print(f"wrote {len(rows)} rows to {args.out}/metrics.csv")
    for key, value in summary.as_dict().items():
        print(f"  {key} = {value}")
    return 0


def _default_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _write_rows(rows, path):
    keys = list(rows[0].keys())
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join(str(r[k]) for k in keys) + "\n")


def _cmd_ablate(args):
    cfg = _default_config(args)
    os.makedirs(args.out, exist_ok=True)
    seeds = list(range(cfg.seed, cfg.seed + args.num_seeds))
    if args.suite == "rl":
        rows = suites.strategy_comparison(cfg, seeds)
        _write_rows(rows, os.path.join(args.out, "strategy_comparison.csv"))
    elif args.suite == "loss":
        cfg.num_frames = min(cfg.num_frames, 3000)
        rows = suites.loss_ablation(cfg, seeds)
        _write_rows(rows, os.path.join(args.out, "loss_ablation.csv"))
    elif args.suite == "calibration":
        rows = []
        for seed in seeds:
            r, u, red = suites.calibration_report(cfg, seed)
            rows.append({"seed": seed,
                         "pearson_r": "undefined" if r is None else r,
                         "frames": len(u)})
        _write_rows(rows, os.path.join(args.out, "calibration.csv"))
    elif args.suite == "theorems":
        t1 = suites.theorem1_suite(cfg.seed)
        rows = [{"n": n, "mean_gap": m, "median_gap": md}
                for n, m, md, _ in t1["rows"]]
        _write_rows(rows, os.path.join(args.out, "theorem1_gaps.csv"))
        violations, checked = suites.theorem2_violations(cfg.seed)
        _write_rows([{"violations": violations, "nodes_checked": checked,
                      "loglog_slope": t1["slope"]}],
                    os.path.join(args.out, "theorem2_check.csv"))
    print(f"suite {args.suite!r} written to {args.out}")
    return 0


def _cmd_trace_gen(args):
    trace = system.make_profile(args.kind, args.seed)
    system.write_trace(trace, args.out)
    print(f"wrote {len(trace.t_ms)} trace points to {args.out}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="splitlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_ab = sub.add_parser("ablate", help="run a comparison suite")
    p_ab.add_argument("--suite", required=True,
                      choices=["rl", "loss", "calibration", "theorems"])
    p_ab.add_argument("--out", required=True)
    p_ab.add_argument("--config", default=None)
    p_ab.add_argument("--seed", type=int, default=None)
    p_ab.add_argument("--num-seeds", type=int, default=3)
    p_ab.set_defaults(func=_cmd_ablate)

    p_tr = sub.add_parser("trace", help="network trace tools")
    tr_sub = p_tr.add_subparsers(dest="trace_command", required=True)
    p_gen = tr_sub.add_parser("gen", help="generate a synthetic trace")
    p_gen.add_argument("--kind", required=True,
                       choices=["stable", "variable", "congested"])
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_trace_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
