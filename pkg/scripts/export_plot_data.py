#!/usr/bin/env python3
"""Export qq / density / profile plot data for a finished study directory.

Usage:
    python scripts/export_plot_data.py --config configs/linear_case1.cfg \
        --out out/linear_case1 [--kinds qq,density,profile]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from localel.cli import main as cli_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--kinds", default="qq,density")
    args = parser.parse_args(argv)

    for kind in [k.strip() for k in args.kinds.split(",") if k.strip()]:
        code = cli_main(["plotdata", "--config", args.config,
                         "--out", args.out, "--kind", kind])
        if code != 0:
            return code
        print(f"wrote {kind} data to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
