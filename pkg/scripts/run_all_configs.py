"""Run every experiment config under ``configs/`` and print where the artifacts went.

    python3 scripts/run_all_configs.py --out runs/
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from cvsi.cli import main as cli_main

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("cvsi-runs"))
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    args = parser.parse_args()

    failures = 0
    for cfg in sorted((ROOT / "configs").glob("*.json")):
        if cfg.name.startswith("gmm_") or (args.only and cfg.stem not in args.only):
            continue  # mixture parameter files are inputs, not run configs
        out = args.out / cfg.stem
        start = time.perf_counter()
        code = cli_main(["run", str(cfg), "--out", str(out), "--threads", str(args.threads)])
        failures += code != 0
        summary = {}
        if code == 0:
            summary = json.loads((out / "manifest.json").read_text())["summary"]
        print(f"{cfg.stem:24s} exit={code} {time.perf_counter() - start:6.1f}s  {json.dumps(summary)[:150]}")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
