#!/usr/bin/env python3
"""Sweep false-positive budgets for exact-match automation, raw vs calibrated.

Usage:
  python scripts/automation_sweep.py --config run.cfg \
      --dev out/eval_dev --test out/eval_test --calib out/calib --out out/sweeps

Writes automation.csv for both variants and prints them side by side.
"""

import argparse
import sys
from pathlib import Path

from icdlab.cli import main as icdlab


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--dev", required=True)
    ap.add_argument("--test", required=True)
    ap.add_argument("--calib", default=None, help="calibration dir; omit for raw-only")
    ap.add_argument("--out", required=True)
    ap.add_argument("--max-fp", default="0.05,0.1,0.15,0.2")
    args = ap.parse_args()
    out = Path(args.out)

    variants = [("raw", [])]
    if args.calib:
        variants.append(("calibrated", ["--calibrated", "--maps", args.calib]))
    for name, extra in variants:
        code = icdlab(["automate", "--config", args.config, "--dev", args.dev,
                       "--test", args.test, "--out", str(out / name),
                       "--max-fp", args.max_fp] + extra)
        if code != 0:
            sys.exit(code)
        print(f"--- {name} ---")
        print((out / name / "automation.csv").read_text(encoding="utf-8"), end="")


if __name__ == "__main__":
    main()
