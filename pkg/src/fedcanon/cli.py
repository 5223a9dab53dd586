"""Command-line front end: ``fedcanon run | compare | validate``.

Exit codes: 0 success, 1 usage or I/O problem, 2 configuration error or
violated step-size condition, 3 probe failure, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .algorithms import ConsistencyError, DivergenceError, prox_count_formula
from .harness import (
    AccountingError,
    ConfigError,
    ExperimentConfig,
    apply_override,
    build_problem,
    report_for,
    run_experiment,
    write_outputs,
)
from .partitioning import PartitionError
from .problems import ParseError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_PROBE, EXIT_DIVERGED = 0, 1, 2, 3, 4
LOG_ENV = "FEDCANON_LOG_LEVEL"

log = logging.getLogger("fedcanon")

SUMMARY_COLUMNS = ("algorithm", "seed", "rounds", "phi", "prox_grad_norm_sq", "test_acc", "prox_cum",
                   "floats_cum", "prox_per_round", "floats_per_client_round", "shard_hash", "failed_probes")


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for assignment in overrides:
        raw = apply_override(raw, assignment)
    return ExperimentConfig.from_dict(raw)


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_run(config_file, out_dir, overrides=()) -> int:
    config = load_config(config_file, overrides)
    result = run_experiment(config)
    csv_path, json_path = write_outputs(result, out_dir)
    last = result.records[-1]
    print(f"{config.algorithm}: T={config.T} phi={last.phi:.6g} |G|^2={last.prox_grad_norm_sq:.6g} -> {csv_path}")
    if result.failed_probes:
        print(f"probe failure: {', '.join(result.failed_probes)} (see {json_path})", file=sys.stderr)
        return EXIT_PROBE
    return EXIT_OK


def cmd_compare(config_file, algorithms, seeds, out_dir, overrides=()) -> int:
    base = load_config(config_file, overrides)
    algorithms = algorithms or [base.algorithm]
    seeds = seeds or [base.seed]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, status = [], EXIT_OK
    for seed in seeds:
        seeded = base.replace(seed=seed)
        problem = build_problem(seeded)  # one partition per seed, shared by every algorithm
        for algorithm in algorithms:
            cfg = seeded.replace(algorithm=algorithm)
            result = run_experiment(cfg, problem)
            write_outputs(result, out, stem=f"{algorithm}_seed{seed}")
            last = result.records[-1]
            rows.append({
                "algorithm": algorithm, "seed": seed, "rounds": cfg.T, "phi": repr(last.phi),
                "prox_grad_norm_sq": repr(last.prox_grad_norm_sq),
                "test_acc": "" if last.test_acc is None else repr(last.test_acc),
                "prox_cum": last.prox_cum, "floats_cum": last.floats_cum,
                "prox_per_round": prox_count_formula(algorithm, problem.N, cfg.K),
                "floats_per_client_round": int(result.trajectory.floats.max(initial=0)),
                "shard_hash": result.shard_hash, "failed_probes": ";".join(result.failed_probes),
            })
            if result.failed_probes:
                status = EXIT_PROBE
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"{r['algorithm']:>10} seed={r['seed']:<3} |G|^2={float(r['prox_grad_norm_sq']):.4g} "
              f"prox/round={r['prox_per_round']} floats/client/round={r['floats_per_client_round']}")
    return status


def cmd_validate(config_file, overrides=()) -> int:
    config = load_config(config_file, overrides)
    problem = build_problem(config)
    report = report_for(config, problem)
    print(f"L = {problem.L:.6g} ({problem.L_method}), rho = {config.reg.rho:.6g}"
          + ("" if problem.mu is None else f", mu = {problem.mu:.6g}"))
    print(report.format())
    return EXIT_OK if report.passed else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcanon", description="Federated composite optimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a (dotted) config key; VALUE is parsed as JSON when possible")

    common(sub.add_parser("run", help="run one experiment and write CSV + JSON summary"))
    p = sub.add_parser("compare", help="run an algorithms x seeds grid on shared partitions")
    common(p)
    p.add_argument("--algorithms", type=_str_list, default=None, help="comma-separated algorithm names")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated integer seeds")
    common(sub.add_parser("validate", help="print the step-size report without running"), out=False)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.override)
        if args.command == "compare":
            return cmd_compare(args.config, args.algorithms, args.seeds, args.out, args.override)
        return cmd_validate(args.config, args.override)
    except (ConfigError, ParseError, PartitionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ConsistencyError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except AccountingError as exc:
        print(f"accounting mismatch: {exc}", file=sys.stderr)
        return EXIT_PROBE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
