#!/usr/bin/env python3
"""Train one model per training-set fraction and print the saturation curve.

Usage: python scripts/data_fractions.py --config run.cfg --prep out/prep --out out/fractions
Assumes `gen-corpus` and `preprocess` already ran (see run_pipeline.py).
"""

import argparse
import sys

from icdlab.cli import main as icdlab


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--prep", required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    code = icdlab(["fractions", "--config", args.config,
                   "--in", args.prep, "--out", args.out])
    if code != 0:
        sys.exit(code)
    with open(f"{args.out}/fractions.csv", encoding="utf-8") as fh:
        print(fh.read(), end="")


if __name__ == "__main__":
    main()
