"""``cvsi run CONFIG`` - run a JSON-configured experiment and write its artifacts.

Exit status: 0 on success, 1 on a runtime failure (including diverged
trajectories), 2 on an invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, parse_config, with_overrides
from .experiments import ExperimentOutput, run_experiment
from .sampler import DivergedTrajectoryError

OUTPUT_ENV = "CVSI_OUTPUT_DIR"
DEFAULT_OUTPUT = "cvsi-output"

log = logging.getLogger("cvsi")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_outputs(out_dir: Path, output: ExperimentOutput) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in output.tables.items():
        write_csv(out_dir / f"{name}.csv", table.columns, table.rows)
        written.append(f"{name}.csv")
    for name, payload in output.json_files.items():
        (out_dir / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(f"{name}.json")
    return written


def _versions() -> dict:
    return {"cvsi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvsi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config", help="path to the JSON run configuration")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None,
                     help=f"output directory (default: config output_dir, then ${OUTPUT_ENV}, then ./{DEFAULT_OUTPUT})")
    run.add_argument("--threads", type=int, default=1, help="worker-pool size for grid-level parallelism")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        config = with_overrides(parse_config(args.config), seed=args.seed, output_dir=args.out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    out_dir = Path(config.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    start = time.perf_counter()
    try:
        output = run_experiment(config, threads=args.threads)
    except DivergedTrajectoryError as err:
        print(f"runtime error: diverged trajectory: {err}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, ArithmeticError) as err:
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - start

    written = write_outputs(out_dir, output)
    manifest = {
        "experiment": config.experiment,
        "seed": config.seed,
        "config": config.to_json_dict(),
        "config_path": str(Path(args.config).resolve()),
        "versions": _versions(),
        "wall_time_s": wall,
        "threads": args.threads,
        "artifacts": written,
        "summary": output.summary,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n",
                                           encoding="utf-8")
    log.info("wrote %d artifacts to %s in %.1f s", len(written), out_dir, wall)
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


if __name__ == "__main__":
    raise SystemExit(main())
