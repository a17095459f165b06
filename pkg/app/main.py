# app/main.py
from __future__ import annotations

import argparse
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Dict, Optional

from tabulate import tabulate

from . import TopoTrackError, __version__
from .cloud_objects import DEFAULT_SWEEP, threshold_sensitivity
from .config import CFG, PRESETS, ConfigError, require_input, resolve_config
from .field_io import (
    FieldFormatError,
    FieldSequence,
    ScenarioError,
    generate_synthetic,
    load_scenario,
    load_sequence,
    write_sequence,
)
from .logger import setup_logging, write_run_artifacts
from .models import RunConfig
from .pipeline import DEFAULT_R_SWEEP, RunResult, r_sensitivity, run_pipeline

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_ERROR = 1
EXIT_INPUT_ERROR = 2

# RunConfig fields exposed as dedicated flags elsewhere
_SKIP_FIELDS = {"dump_couplings", "dump_trees"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One `--field-name` flag per RunConfig field; unset flags leave lower layers alone."""
    for name, info in RunConfig.model_fields.items():
        if name in _SKIP_FIELDS:
            continue
        flag = "--" + name.replace("_", "-")
        ann = info.annotation
        base = ann
        if typing.get_origin(ann) is typing.Union:
            base = next(a for a in typing.get_args(ann) if a is not type(None))
        if base is bool:
            p.add_argument(flag, dest=name, action="store_true", default=None)
        elif typing.get_origin(base) is tuple:
            p.add_argument(flag, dest=name, type=float, nargs=2, metavar=("LOW", "HIGH"))
        elif typing.get_origin(base) is typing.Literal:
            p.add_argument(flag, dest=name, type=int, choices=typing.get_args(base))
        elif base in (int, float):
            p.add_argument(flag, dest=name, type=base)
        else:
            p.add_argument(flag, dest=name, type=str)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Flat JSON run configuration.")
    p.add_argument("--preset", choices=sorted(PRESETS), help="Parameter preset (lowest precedence).")
    p.add_argument("--jobs", type=int, default=CFG["JOBS"], help="Worker processes.")
    p.add_argument("--fixed-zone", action="store_true", help="Use the preset's fixed zone threshold.")


def _parse_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(
        prog="topotrack",
        description="Track cloud systems through a sequence of 2D scalar fields via merge trees "
        "and partial fused Gromov-Wasserstein matching.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--debug", action="store_true", help="Verbose debug output.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the tracking pipeline on a directory of .grid files.")
    _add_run_options(run)
    run.add_argument("--dump-couplings", dest="dump_couplings", action="store_true", default=None,
                     help="Also write couplings.csv.")
    run.add_argument("--dump-trees", dest="dump_trees", action="store_true", default=None,
                     help="Also write per-frame merge tree dumps.")
    _add_config_flags(run)

    synth = sub.add_parser("synth", help="Render a synthetic scenario into .grid files.")
    synth.add_argument("scenario", help="Scenario JSON.")
    synth.add_argument("output_dir", help="Directory for frame_NNN.grid files.")

    sweep = sub.add_parser("sweep", help="Detection-threshold sensitivity table.")
    sweep.add_argument("input_dir")
    sweep.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_SWEEP))
    sweep.add_argument("--min-area-px", type=int, default=10)
    sweep.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    sweep.add_argument("--output", help="Write the table as CSV here as well.")

    rsweep = sub.add_parser("rsweep", help="Relative-threshold sensitivity of the trajectories.")
    _add_run_options(rsweep)
    rsweep.add_argument("--values", type=float, nargs="+", default=list(DEFAULT_R_SWEEP),
                        help="Values of r to re-track with.")
    rsweep.add_argument("--output", help="Write the table as CSV here as well.")
    _add_config_flags(rsweep)

    return p.parse_args(argv)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    names = set(RunConfig.model_fields)
    out = {k: v for k, v in vars(args).items() if k in names and v is not None}
    if "m_range" in out:
        out["m_range"] = tuple(out["m_range"])
    return out


def _print_summary(result: RunResult) -> None:
    stats = result.stats
    counts = [[k.replace("_", " "), v] for k, v in stats.counts.items()]
    print(tabulate(counts, headers=["run", "count"], tablefmt="github"))
    print()
    rows = []
    for metric, agg in stats.aggregates.items():
        rows.append([metric, agg["n"], agg["median"], agg["mean"], agg["iqr"]])
    print(tabulate(rows, headers=["metric", "n", "median", "mean", "IQR"], tablefmt="github",
                   floatfmt=".4g", missingval="-"))


def _load_run(args: argparse.Namespace) -> tuple[RunConfig, FieldSequence]:
    cfg = resolve_config(args.config, args.preset, _overrides(args), fixed_zone=args.fixed_zone)
    require_input(cfg)
    return cfg, load_sequence(cfg.input_dir, cfg.interval_minutes)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg, seq = _load_run(args)
    except (ConfigError, FieldFormatError) as e:
        log.error("%s", e)
        return EXIT_INPUT_ERROR

    log.info("tracking %d frames, match limit %.1f km", len(seq), cfg.match_limit_km)
    try:
        result = run_pipeline(cfg, jobs=max(1, args.jobs), seq=seq)
        write_run_artifacts(result)
    except TopoTrackError as e:
        log.error("%s", e)
        return EXIT_RUN_ERROR

    _print_summary(result)
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    try:
        seq = generate_synthetic(load_scenario(args.scenario))
    except (ScenarioError, FieldFormatError, OSError) as e:
        log.error("%s", e)
        return EXIT_INPUT_ERROR
    paths = write_sequence(seq, args.output_dir)
    print(f"Wrote {len(paths)} frames → {Path(args.output_dir)}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    try:
        seq = load_sequence(args.input_dir, interval_minutes=1.0)
        table = threshold_sensitivity(seq, args.thresholds, args.min_area_px, args.connectivity)
    except TopoTrackError as e:
        log.error("%s", e)
        return EXIT_INPUT_ERROR
    print(tabulate(table, headers="keys", tablefmt="github", showindex=False, floatfmt=".3g"))
    if args.output:
        table.to_csv(args.output, index=False)
    return EXIT_OK


def _cmd_rsweep(args: argparse.Namespace) -> int:
    bad = [r for r in args.values if not 0.0 < r <= 1.0]
    if bad:
        log.error("r must lie in (0, 1], got %s", bad)
        return EXIT_INPUT_ERROR
    try:
        cfg, seq = _load_run(args)
    except (ConfigError, FieldFormatError) as e:
        log.error("%s", e)
        return EXIT_INPUT_ERROR

    try:
        result = run_pipeline(cfg, jobs=max(1, args.jobs), seq=seq)
        table = r_sensitivity(result, args.values)
    except TopoTrackError as e:
        log.error("%s", e)
        return EXIT_RUN_ERROR
    print(tabulate(table, headers="keys", tablefmt="github", showindex=False, floatfmt=".4g", missingval="-"))
    if args.output:
        table.to_csv(args.output, index=False)
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = _parse_args(sys.argv[1:] if argv is None else argv)
    setup_logging("DEBUG" if args.debug else CFG["LOG_LEVEL"])
    commands = {"run": _cmd_run, "synth": _cmd_synth, "sweep": _cmd_sweep, "rsweep": _cmd_rsweep}
    return commands[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
