"""Command line entry point: ``tiglab run|sweep|efficiency|plot``.

Exit codes: 0 success, 1 runtime failure, 2 config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, ExperimentConfig
from .experiment import StageError, plot_dir, report_efficiency, run_experiment, sweep

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _parse_values(raw: str) -> list[float]:
    parts = [p for p in raw.split(",") if p.strip()]
    try:
        return [int(p) if p.strip().lstrip("-").isdigit() else float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError("$.values", f"not a number list: {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiglab", description="Prompt tuning experiments on temporal interaction graphs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="pretrain, tune and evaluate for every seed")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, action="append", dest="seeds", help="override seeds (repeatable)")
    run.add_argument("--out", help="output directory (default: config output_dir)")

    sw = sub.add_parser("sweep", help="one run per value of a config axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma separated, e.g. 0.05,0.1,0.15,0.2")
    sw.add_argument("--out")

    eff = sub.add_parser("efficiency", help="epoch wall-clock and trainable scalars per stage")
    eff.add_argument("--config", required=True)
    eff.add_argument("--max-events", type=int, default=None, help="cap events per stage")
    eff.add_argument("--repeats", type=int, default=5, help="timed epochs per stage; the fastest is kept")
    eff.add_argument("--out", help="write the record as JSON here")

    pl = sub.add_parser("plot", help="CSV (and PNG when matplotlib is present) from reports under a directory")
    pl.add_argument("--in", dest="in_dir", required=True)
    pl.add_argument("--kind", choices=["sweep", "comparison"], required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "run":
            report = run_experiment(ExperimentConfig.load(args.config), seeds=args.seeds, out_dir=args.out)
            print(json.dumps(report["aggregate"], indent=2))
        elif args.command == "sweep":
            reports = sweep(ExperimentConfig.load(args.config), args.axis, _parse_values(args.values), args.out)
            for rep in reports:
                print(rep["sweep"]["value"], json.dumps(rep["aggregate"]))
        elif args.command == "efficiency":
            record = report_efficiency(ExperimentConfig.load(args.config), max_events=args.max_events,
                                        repeats=args.repeats)
            text = json.dumps(record, indent=2)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            print(text)
        else:
            for path in plot_dir(args.in_dir, args.kind):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime failure {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure for the exit contract
        print(f"runtime failure [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
