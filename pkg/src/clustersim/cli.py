"""Command-line front end: run, sweep, dumpdb, dumplog."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .runner import EXIT_LIVELOCK, EXIT_OK, EXIT_PARSE, parse_axis, run_scenario, sweep
from .scenario import ParseError, load


def _load(path: str):
    try:
        return load(path)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return None
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return None


def cmd_run(args: argparse.Namespace) -> int:
    sc = _load(args.file)
    if sc is None:
        return EXIT_PARSE
    try:
        report = run_scenario(sc, args.seed, until=args.until, trace_path=args.trace)
    except (ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    sys.stdout.write(report.format())
    return report.exit_code


def cmd_sweep(args: argparse.Namespace) -> int:
    template = Path(args.template).read_text()
    try:
        axes = [parse_axis(a) for a in args.axis]
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_PARSE
    result = sweep(template, axes, args.seed)
    sys.stdout.write(result.format())
    if result.errors:
        return EXIT_PARSE
    if any(r.exit_code == EXIT_LIVELOCK for _, r in result.runs):
        return EXIT_LIVELOCK
    return EXIT_OK if result.violations == 0 else 1


def _final_cluster(args: argparse.Namespace):
    sc = _load(args.file)
    if sc is None:
        return None
    report = run_scenario(sc, args.seed, until=args.until)
    return report.cluster


def cmd_dumpdb(args: argparse.Namespace) -> int:
    cluster = _final_cluster(args)
    if cluster is None:
        return EXIT_PARSE
    if args.node not in cluster.nodes:
        print(f"no node {args.node}", file=sys.stderr)
        return EXIT_PARSE
    db = cluster.node(args.node).db
    sys.stdout.write(f"# version={db.version} chain={db.chain}\n{db.serialize()}")
    return EXIT_OK


def cmd_dumplog(args: argparse.Namespace) -> int:
    cluster = _final_cluster(args)
    if cluster is None:
        return EXIT_PARSE
    if args.node not in cluster.nodes:
        print(f"no node {args.node}", file=sys.stderr)
        return EXIT_PARSE
    sys.stdout.write(cluster.node(args.node).events.dump())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clustersim", description="Cluster service simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("file")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--trace", default=None, help="write the full trace here")
    r.add_argument("--until", type=int, default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a template over substitution axes")
    s.add_argument("template")
    s.add_argument("--axis", action="append", required=True,
                   help="NAME=lo..hi[:step] or NAME=a,b,c")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    for name, fn in (("dumpdb", cmd_dumpdb), ("dumplog", cmd_dumplog)):
        d = sub.add_parser(name, help=f"run a scenario, then print node state ({name})")
        d.add_argument("node", type=int)
        d.add_argument("file")
        d.add_argument("--seed", type=int, default=None)
        d.add_argument("--until", type=int, default=None)
        d.set_defaults(func=fn)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
