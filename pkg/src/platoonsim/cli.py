"""Command line entry point: run, serve, kpi and plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bridge import CoSimulationFault, connect, serve
from .kpi import compute_kpis
from .output import OutputError, emit_plots, read_csv, write_csv
from .runner import RunAborted, run
from .scenario import ScenarioError, build_simulator, load_scenario, resolve_scenario, simulator_factory

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAULT = 2

log = logging.getLogger("platoonsim")


def _window(args):
    if args.t_start is None and args.t_end is None:
        return None
    return (args.t_start if args.t_start is not None else float("-inf"),
            args.t_end if args.t_end is not None else float("inf"))


def cmd_run(args) -> int:
    spec = load_scenario(resolve_scenario(args.scenario)).with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "trajectory.csv"
    try:
        if args.remote:
            handle = connect(args.remote, spec.dt_s, seed=spec.seed)
            try:
                records = run(spec, handle)
            finally:
                handle.close()
        else:
            records = run(spec, build_simulator(spec))
    except RunAborted as exc:
        write_csv(exc.records, csv_path)
        print(f"co-simulation fault: {exc.cause}; partial log in {csv_path}", file=sys.stderr)
        return EXIT_FAULT
    except CoSimulationFault as exc:
        print(f"co-simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    write_csv(records, csv_path)
    if not args.no_plots:
        emit_plots(records, out, _window(args))
    print(json.dumps(compute_kpis(records, spec).to_dict(), indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    spec = load_scenario(resolve_scenario(args.scenario))
    served = serve(simulator_factory(spec), spec.dt_s, args.host, args.port,
                   max_sessions=args.max_sessions,
                   ready=lambda addr: log.info("listening on %s:%s", *addr[:2]))
    log.info("served %d session(s)", served)
    return EXIT_OK


def cmd_kpi(args) -> int:
    spec = load_scenario(resolve_scenario(args.scenario)) if args.scenario else None
    print(json.dumps(compute_kpis(read_csv(args.traj), spec).to_dict(), indent=2))
    return EXIT_OK


def cmd_plot(args) -> int:
    for p in emit_plots(read_csv(args.traj), args.out, _window(args)):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="platoonsim", description="Truck platooning co-simulation")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write trajectory.csv and plots")
    r.add_argument("--scenario", required=True, help="scenario file or shipped scenario name")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--remote", metavar="HOST:PORT", help="drive a simulator served by 'serve'")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("serve", help="serve the reference simulator over TCP")
    s.add_argument("--scenario", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=9000)
    s.add_argument("--max-sessions", type=int, default=None, help="exit after N sessions")
    s.set_defaults(func=cmd_serve)

    k = sub.add_parser("kpi", help="compute KPIs from a trajectory CSV")
    k.add_argument("--traj", required=True)
    k.add_argument("--scenario", help="scenario for maneuver-specific KPIs")
    k.set_defaults(func=cmd_kpi)

    pl = sub.add_parser("plot", help="plot a trajectory CSV")
    pl.add_argument("--traj", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    for cmd in (r, pl):
        cmd.add_argument("--t-start", type=float, help="crop plots from this time [s]")
        cmd.add_argument("--t-end", type=float, help="crop plots up to this time [s]")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, OutputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
