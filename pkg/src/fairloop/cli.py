"""Command-line entry point.

Subcommands: train, evaluate, sweep, select, verify, export-env.
Exit codes: 0 success, 1 training/unexpected failure, 2 configuration
error, 3 environment-table load error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import envs, harness
from .mdp import ConfigurationError, FairloopError, LoadError

EXIT_TRAINING = 1
EXIT_CONFIG = 2
EXIT_LOAD = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration and write run artifacts")
    p.add_argument("config", help="JSON config file with TrainConfig fields")
    p.add_argument("--out", default=None, help="artifacts directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("evaluate", help="deploy a frozen checkpoint")
    p.add_argument("run_dir", help="run directory holding manifest and checkpoints")
    p.add_argument("--env", default=None, help="override the environment")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--out", default=None, help="metrics CSV path")

    p = sub.add_parser("sweep", help="train and evaluate a hyperparameter grid")
    p.add_argument("grid", help="JSON grid file")
    p.add_argument("--out", default="sweep", help="output directory")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("select", help="pick the configuration per the selection rule")
    p.add_argument("results", help="results.json from a sweep")
    p.add_argument("--omega", type=float, default=0.05)

    p = sub.add_parser("verify", help="run the exact-theorem verification table")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-env", help="dump a validated environment table")
    p.add_argument("name", help="builtin name or table path")
    p.add_argument("--out", default=None, help="write to file instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            progress = None
            if not args.quiet:
                progress = lambda k, n, row: print(
                    f"iter {k}/{n} resource {row['resource']:.1f} "
                    f"obs-gap {row['delta_observed']:+.4f}",
                    file=sys.stderr,
                )
            out = harness.run(args.config, args.out, progress=progress)
            print(out)
            return 0
        if args.command == "evaluate":
            out_path = args.out or str(args.run_dir).rstrip("/") + "/eval_metrics.csv"
            _rows, summary = harness.evaluate(
                args.run_dir,
                env_name=args.env,
                seeds=args.seeds,
                horizon=args.horizon,
                record_every=args.record_every,
                out_path=out_path,
            )
            print(
                json.dumps(
                    {
                        "metrics": out_path,
                        "avg_abs_delta_true": summary.mean("avg_abs_delta_true"),
                        "abs_avg_delta_true": summary.mean("abs_avg_delta_true"),
                        "reward": summary.mean("final_resource"),
                        "reward_std": summary.std("final_resource"),
                    },
                    indent=1,
                )
            )
            return 0
        if args.command == "sweep":
            results = harness.sweep(args.grid, args.out, workers=args.workers)
            print(json.dumps(results, indent=1))
            return 0
        if args.command == "select":
            with open(args.results) as fh:
                results = json.load(fh)
            print(json.dumps(harness.select(results, omega=args.omega), indent=1))
            return 0
        if args.command == "verify":
            ok = harness.verify(args.instances, args.seed)
            return 0 if ok else EXIT_TRAINING
        if args.command == "export-env":
            table = envs.export_env(args.name)
            text = json.dumps(table, indent=1)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text + "\n")
            else:
                print(text)
            return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except FairloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
