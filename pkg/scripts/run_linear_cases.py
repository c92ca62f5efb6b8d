#!/usr/bin/env python3
"""Run the four contaminated linear-IV study cases and print their tables.

Usage:
    python scripts/run_linear_cases.py [--reps N] [--workers N] [--out DIR]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from localel.cli import main as cli_main

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--out", default="out")
    args = parser.parse_args(argv)

    for case in ("linear_case1", "linear_case2", "linear_case3", "linear_case4"):
        out_dir = os.path.join(args.out, case)
        cli_args = ["run", "--config", os.path.join(CONFIGS, case + ".cfg"),
                    "--out", out_dir]
        if args.reps is not None:
            cli_args += ["--reps", str(args.reps)]
        if args.workers is not None:
            cli_args += ["--workers", str(args.workers)]
        code = cli_main(cli_args)
        if code != 0:
            return code
        print(f"== {case}")
        with open(os.path.join(out_dir, "metrics.csv")) as fh:
            for line in fh:
                cols = line.rstrip("\n").split(",")
                print("  " + "  ".join(f"{c:>12.12s}" for c in cols))
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
