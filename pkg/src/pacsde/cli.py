"""Command-line entry point.

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen, harness
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .datagen import DatasetParseError
from .sde import DivergenceError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacsde",
        description="Train and evaluate hybrid Bayesian neural SDEs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("system", choices=["lorenz", "lotka-volterra"])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.add_argument("--export-forecast", default=None,
                   help="write a forecast envelope CSV for the first sequence")
    p.add_argument("--trajectories", type=int, default=21,
                   help="trajectory count for the forecast envelope")

    p = sub.add_parser("ablation", help="run the prior-knowledge ablation grid")
    p.add_argument("--config", required=True, help="base config (variant is overridden)")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--perturb-std", type=float, default=1.0)

    p = sub.add_parser("converge", help="strong-convergence slope study")
    p.add_argument("--oracle", choices=["ou", "gbm", "linear"], required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--base-dt", type=float, default=1.0)

    sub.add_parser("selftest", help="run the invariant self-check battery")
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        system = args.system.replace("-", "_")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        train, test = datagen.GENERATORS[system](args.seed)
        manifest = {"system": system, "seed": args.seed, "spacing": datagen.OBS_SPACING}
        datagen.write_dataset(train, out / "train.csv", manifest)
        datagen.write_dataset(test, out / "test.csv", manifest)
        print(f"wrote {train.n_sequences} train / {test.n_sequences} test sequences to {out}")
        return 0

    if args.command == "train":
        config = load_config(args.config)
        result = harness.run_training(config, args.out_dir)
        final = result.final
        print(f"finished {result.n_steps} steps; checkpoint: {result.checkpoint}")
        if final is not None:
            print(f"final loss {final.total:.6g} (mll {final.mll:.6g}, "
                  f"complexity {final.complexity:.6g})")
        return 0

    if args.command == "eval":
        dataset = datagen.read_dataset(args.data, role="test")
        report = harness.evaluate(args.checkpoint, dataset, args.samples,
                                  args.horizon, args.seed)
        payload = json.dumps(report.to_dict(), indent=2)
        print(payload)
        if args.out:
            Path(args.out).write_text(payload + "\n")
        if args.export_forecast:
            harness.export_forecast(args.checkpoint, dataset.sequences[0],
                                    args.export_forecast, args.trajectories,
                                    args.horizon, args.seed)
            print(f"forecast envelope written to {args.export_forecast}")
        return 0

    if args.command == "ablation":
        config = load_config(args.config)
        summary = harness.run_ablation(config, args.reps, args.out_dir,
                                       perturb_std=args.perturb_std)
        print(harness.ABLATION_HEADER)
        for e in summary:
            print(f"{e['prior_row']},{e['variant']},{e['mse_mean']:.6g},"
                  f"{e['mse_stderr']:.6g},{e['nll_mean']:.6g},{e['nll_stderr']:.6g},"
                  f"{e['n_ok']}")
        return 0

    if args.command == "converge":
        report = harness.run_convergence(args.oracle, args.out, args.samples,
                                         args.seed, args.base_dt)
        print(json.dumps(report, indent=2))
        return 0

    if args.command == "selftest":
        failures = harness.selftest(verbose=True)
        print(f"{len(harness.SELFTEST_CHECKS) - failures}/{len(harness.SELFTEST_CHECKS)} "
              "checks passed")
        return 0 if failures == 0 else 1

    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (DatasetParseError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
