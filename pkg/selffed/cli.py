"""
Command-line entry point.

    selffed run <config> [--workers K] [--output-dir DIR]
    selffed sweep --param beta --values 0.6 0.9 1.0 <config>
    selffed compare <summary.json> <summary.json>... [--out table.csv]
    selffed partition --delta 0.5 --clients 5 --manifest-out parts.json [--config C] [--seed S]

Exit status is 0 on success and 1 when a run (or any run of a sweep)
failed; argument errors exit with 2 as argparse does.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, SelectionSchedule, load_config
from .errors import SelfFedError
from .experiment import BETA_SWEEP, parse_sweep_value, partition_only, run_experiment, run_sweep
from .logging import get_logger, setup_logging
from .metrics import compare_runs, load_summary, write_comparison

logger = get_logger("cli")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selffed", description="Federated self-supervised learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment")
    run.add_argument("config", type=Path)
    run.add_argument("--workers", type=int, default=None, help="Parallel clients per round")
    run.add_argument("--output-dir", type=Path, default=None)

    sweep = sub.add_parser("sweep", help="Run one experiment per value of a config field")
    sweep.add_argument("config", type=Path)
    sweep.add_argument("--param", default="beta", help="Dotted config field or alias (beta, delta, ratio, ...)")
    sweep.add_argument("--values", nargs="+", default=None, help=f"Defaults to {list(BETA_SWEEP)} for beta")
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--output-dir", type=Path, default=None)

    compare = sub.add_parser("compare", help="Compare finished runs")
    compare.add_argument("summaries", nargs="+", type=Path)
    compare.add_argument("--out", type=Path, default=None, help="Write the table as CSV")

    part = sub.add_parser("partition", help="Write a client partition manifest")
    part.add_argument("--delta", type=float, required=True)
    part.add_argument("--clients", type=int, required=True)
    part.add_argument("--manifest-out", type=Path, required=True)
    part.add_argument("--config", type=Path, default=None)
    part.add_argument("--seed", type=int, default=None)
    return parser


def _with_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "output_dir", None) is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg.validate()


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    result = run_experiment(cfg)
    if result.success:
        print(json.dumps(result.summary["final"]))
    else:
        print(f"Run failed: {result.error['type']}: {result.error['message']}", file=sys.stderr)
    return result.exit_code


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    if args.values is None:
        if args.param != "beta":
            print("--values is required unless sweeping beta", file=sys.stderr)
            return 2
        values = list(BETA_SWEEP)
    else:
        values = [parse_sweep_value(v) for v in args.values]
    rows = run_sweep(cfg, args.param, values)
    for row in rows:
        print(f"{row['param']}={row['value']}\t{row['status']}\t{row['test_accuracy']}")
    return 0 if all(row["status"] == "completed" for row in rows) else 1


def _cmd_compare(args: argparse.Namespace) -> int:
    rows = compare_runs([load_summary(p) for p in args.summaries])
    for row in rows:
        flag = "" if row.comparable else "  (not comparable)"
        print(
            f"{row.method}\tdelta={row.delta}\tlabels={row.label_fraction}\tbeta={row.beta}\t"
            f"acc={row.mean_accuracy:.4f}\tdiff={row.accuracy_delta:+.4f}{flag}"
        )
    if args.out:
        write_comparison(rows, args.out)
    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig(seed=args.seed if args.seed is not None else 0)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(
        cfg,
        federation=replace(
            cfg.federation,
            num_clients=args.clients,
            clients_per_round=args.clients,
            selection=SelectionSchedule.UNIFORM,
            selection_weights=(),
        ),
        partition=replace(cfg.partition, delta=args.delta, size_multipliers=()),
    ).validate()
    plan = partition_only(cfg, args.manifest_out)
    print(json.dumps({"sizes": plan.sizes, "manifest": str(args.manifest_out)}))
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
    "partition": _cmd_partition,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command in ("compare", "partition"):
        setup_logging()
    try:
        return COMMANDS[args.command](args)
    except (SelfFedError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
