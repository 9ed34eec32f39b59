"""Command-line entry point: ``deepmc <verb> ...``.

Exit codes: 0 success, 1 configuration error, 2 partial failure (failed
runs, or a report with missing cells).
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import experiments as ex
from .data import DATA_ROOT_ENV
from .exceptions import ConfigError, DeepMCError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def parse_seeds(text):
    """``"0,1,2"``, ``"0-4"`` or ``"3"``."""
    seeds = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"cannot parse seed list {text!r}", "--seeds") from exc
    if not seeds:
        raise ConfigError("empty seed list", "--seeds")
    return seeds


def _grid_args(p):
    p.add_argument("config", help="config file or preset name (see `deepmc presets`)")
    p.add_argument("--seeds", help="seed list overriding the config, e.g. 0-4 or 0,2")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    p.add_argument("--force", action="store_true", help="re-run configurations that already have records")
    p.add_argument("--out", help="output directory (default: results/<name>)")


def build_parser():
    parser = argparse.ArgumentParser(prog="deepmc", description="Deep linear matrix completion experiments.",
                                     epilog=f"Relative dataset paths resolve against ${DATA_ROOT_ENV}.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    _grid_args(sub.add_parser("run", help="run an experiment grid"))
    _grid_args(sub.add_parser("validate-dynamics", help="run an oracle-validation grid"))
    _grid_args(sub.add_parser("baselines", help="run a grid of baseline solvers"))
    rep = sub.add_parser("report", help="render a table from a manifest")
    rep.add_argument("manifest")
    rep.add_argument("--preset", default="table1")
    rep.add_argument("--out", help="write the CSV form here")
    plot = sub.add_parser("plotdata", help="long-format CSV for a figure")
    plot.add_argument("manifest")
    plot.add_argument("--figure", default="fig1")
    plot.add_argument("--out", help="output CSV (default: stdout)")
    sub.add_parser("presets", help="list the bundled configs")
    return parser


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3g}"


def _run(args, require_task=None):
    seeds = parse_seeds(args.seeds) if args.seeds else None
    grid = ex.load_config(args.config, seeds)
    if require_task is not None:
        tasks = {p["task"] for p in grid.runs()}
        if not tasks <= set(require_task):
            raise ConfigError(f"this verb needs task in {require_task}, got {sorted(tasks)}", "task")
    result = ex.run_grid(grid, out=args.out, jobs=args.jobs, force=args.force)
    for row in result.summary_rows:
        print(f"{row['label']:<32} runs={row['n_runs']} err={_fmt(row['test_error_mean'])} "
              f"rank={row['effective_rank_rounded']} failed={row['n_failed']}")
    if require_task == ("oracle-validation",):
        for rec in result.records:
            if rec["status"] == "ok":
                print(f"{rec['label']:<20} seed={rec['params']['seed']} dev={_fmt(rec['max_deviation'])} "
                      f"richardson={[round(r, 2) for r in rec['richardson_ratios']]} psd={_fmt(rec['psd_margin'])}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_PARTIAL if result.n_failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "run":
            return _run(args)
        if args.verb == "validate-dynamics":
            return _run(args, ("oracle-validation",))
        if args.verb == "baselines":
            grid_tasks = ("baseline", "synthetic")
            seeds = parse_seeds(args.seeds) if args.seeds else None
            grid = ex.load_config(args.config, seeds)
            if any(ex.resolve_params(p)["method"] not in ex.BASELINE_METHODS for p in grid.runs()):
                raise ConfigError("baselines verb only runs soft_impute / soft_impute_path / nuclear_min", "method")
            return _run(args, grid_tasks)
        if args.verb == "report":
            text, csv_text, warns = ex.report_table(args.manifest, args.preset)
            print(text)
            if args.out:
                Path(args.out).write_text(csv_text)
            for w in warns:
                print(f"warning: {w}", file=sys.stderr)
            return EXIT_PARTIAL if warns else EXIT_OK
        if args.verb == "plotdata":
            text, warns = ex.emit_plot_data(args.manifest, args.figure, args.out)
            if not args.out:
                sys.stdout.write(text)
            for w in warns:
                print(f"warning: {w}", file=sys.stderr)
            return EXIT_PARTIAL if warns else EXIT_OK
        if args.verb == "presets":
            print("\n".join(ex.preset_names()))
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeepMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
