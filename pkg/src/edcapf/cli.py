"""Command-line entry point.

Exit codes: 0 success, 1 other model error, 2 configuration error,
3 infeasible deadlines, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys

from . import harness
from .errors import ConfigError, EdcaError, Infeasible, NonConvergence

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGENCE = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file (YAML)")
    common.add_argument("--scenario", help="alias of --config")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--duration", type=float, help="override the run length (us)")
    common.add_argument("--out", help="CSV output path (default: stdout)")
    common.add_argument("--quiet", action="store_true", help="no progress or summary on stderr")
    common.add_argument("--plot", action="store_true",
                        help="also write PNG figures next to --out")
    p = argparse.ArgumentParser(prog="edcapf", description=(
        "Proportional-fair EDCA: analytic model, optimiser, sweeps and closed-loop runs."))
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("model", parents=[common], help="analytic metrics at the configured CW_min")
    sub.add_parser("optimize", parents=[common], help="delay-constrained PF operating point")
    sw = sub.add_parser("sweep", parents=[common], help="optimiser across the sweep grid")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes for grid points")
    sub.add_parser("closed-loop", parents=[common], help="optimiser + LQI controller + plant")
    return p


def _stem(path: str) -> str:
    return os.path.splitext(path)[0]


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def run(args) -> int:
    path = args.config or args.scenario
    if path is None:
        raise ConfigError("a scenario file is required (--config or --scenario)")
    if args.config and args.scenario and args.config != args.scenario:
        raise ConfigError("--config and --scenario name different files")
    if args.plot and (args.out is None or args.out == "-"):
        raise ConfigError("--plot needs --out so figures have a place to go")
    sc = harness.load_scenario(path)
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    if args.duration is not None:
        if not args.duration >= sc.config.beacon:
            raise ConfigError(f"--duration must cover at least one beacon ({sc.config.beacon} us)",
                              field="duration")
        sc = dataclasses.replace(sc, duration=args.duration)
    names = sc.config.names
    figures = []

    if args.command == "closed-loop":
        if sc.sweep is not None:
            raise ConfigError("closed-loop runs take an event timeline, not a sweep", field="sweep")
        with _output(args.out) as fh:
            res = harness.cmd_closed_loop(sc, stream=fh)
        summary = res.summary.to_csv()
        if args.out and args.out != "-":
            with open(f"{_stem(args.out)}_summary.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write(summary)
            _log(args, f"wrote {len(res.records.rows)} beacons to {args.out}")
        if not args.quiet:
            sys.stderr.write(summary)
        if args.plot:
            from . import plotting
            figures = plotting.plot_closed_loop(res.records, names, _stem(args.out))
    else:
        if args.command == "model":
            table = harness.cmd_model(sc)
        elif args.command == "optimize":
            table = harness.cmd_optimize(sc)
        else:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1", field="jobs")
            table = harness.cmd_sweep(sc, jobs=args.jobs)
            failed = sum(1 for r in table.rows if r.get("error"))
            if failed:
                _log(args, f"{failed} of {len(table.rows)} sweep points failed (see error column)")
        with _output(args.out) as fh:
            fh.write(table.to_csv())
        if args.plot:
            from . import plotting
            stem = _stem(args.out)
            if args.command == "model":
                figures = plotting.plot_model(table, stem)
            elif args.command == "optimize":
                figures = plotting.plot_optimize(table, names, stem)
            else:
                figures = plotting.plot_sweep(table, names, sc.sweep.parameter, stem)
    for f in figures:
        _log(args, f"wrote {f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.probe:
            print(f"probe: best max D/d = {exc.probe.get('best_ratio'):.6g}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonConvergence as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except EdcaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
