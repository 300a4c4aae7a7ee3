#!/usr/bin/env python3
"""End-to-end desk demo: train on synthetic handovers, evaluate, simulate.

Everything lands under the chosen output directory; the printed summary
shows the headline numbers. Equivalent CLI:

    handover-cds train --synthetic 24 --seed 101 --out out/bundle
    handover-cds eval  --models out/bundle --seed 7 --out out/eval
    handover-cds simulate --models out/bundle --out out/session.csv
"""

import argparse
import json
import sys
from pathlib import Path

from handover_cds.cli import main as cli


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--pairs", type=int, default=24)
    parser.add_argument("--seed", type=int, default=101)
    args = parser.parse_args(argv)

    out = Path(args.out)
    bundle = out / "bundle"
    code = cli(["train", "--synthetic", str(args.pairs),
                "--seed", str(args.seed), "--out", str(bundle)])
    if code != 0:
        return code
    code = cli(["eval", "--models", str(bundle), "--seed", "7",
                "--out", str(out / "eval")])
    if code != 0:
        return code
    code = cli(["simulate", "--models", str(bundle),
                "--out", str(out / "session.csv")])
    if code != 0:
        return code

    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    print("\ndesk demo summary")
    print(f"  convergence rate        {metrics['convergence_rate']:.2f}")
    print(f"  mean time to handover   "
          f"{metrics['mean_time_to_handover']:.2f} s")
    print(f"  recognition accuracy    "
          f"{metrics['recognition_accuracy']:.3f}")
    print(f"  session export          {out / 'session.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
