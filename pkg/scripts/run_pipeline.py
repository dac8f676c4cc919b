#!/usr/bin/env python3
"""Run the full chain: corpus → preprocess → train → rerank → evaluate →
calibrate → automate → report, all under one working directory.

Usage: python scripts/run_pipeline.py --config run.cfg --workdir out/
Any non-zero exit from a stage stops the chain with that stage's code.
"""

import argparse
import sys
from pathlib import Path

from icdlab.cli import main as icdlab


def run(argv):
    print("+ icdlab " + " ".join(argv), flush=True)
    code = icdlab(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--max-fp", default="0.05,0.1,0.15,0.2")
    args = ap.parse_args()
    w = Path(args.workdir)
    w.mkdir(parents=True, exist_ok=True)
    c = args.config

    run(["gen-corpus", "--config", c, "--out", str(w / "corpus")])
    run(["preprocess", "--config", c, "--in", str(w / "corpus"), "--out", str(w / "prep")])
    run(["train", "--config", c, "--in", str(w / "prep"), "--out", str(w / "model")])
    run(["train-reranker", "--config", c, "--in", str(w / "prep"),
         "--base", str(w / "model"), "--out", str(w / "reranker")])
    run(["evaluate", "--config", c, "--in", str(w / "prep"), "--model", str(w / "model"),
         "--out", str(w / "eval_dev"), "--split", "dev"])
    run(["evaluate", "--config", c, "--in", str(w / "prep"), "--model", str(w / "model"),
         "--out", str(w / "eval_test"), "--split", "test"])
    run(["evaluate", "--config", c, "--in", str(w / "prep"), "--model", str(w / "model"),
         "--reranker", str(w / "reranker"), "--out", str(w / "eval_test_rr"),
         "--split", "test"])
    run(["calibrate", "--config", c, "--in", str(w / "eval_dev"), "--out", str(w / "calib")])
    run(["automate", "--config", c, "--dev", str(w / "eval_dev"),
         "--test", str(w / "eval_test"), "--out", str(w / "automation"),
         "--max-fp", args.max_fp])
    run(["automate", "--config", c, "--dev", str(w / "eval_dev"),
         "--test", str(w / "eval_test"), "--out", str(w / "automation_cal"),
         "--max-fp", args.max_fp, "--calibrated", "--maps", str(w / "calib")])
    run(["report", "--config", c, "--in", str(w / "eval_test"), "--out", str(w / "report")])
    print(f"pipeline complete under {w}")


if __name__ == "__main__":
    main()
