"""CCP inference against each best-epoch support set, with outlier cubes mixed in."""

import argparse
import json
from pathlib import Path

import torch

from hsiproto.experiments import run_baseline, run_complete


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--outlier-rate", type=float, default=0.1)
    ap.add_argument("--baseline", action="store_true",
                    help="also train the supervised baseline on each split")
    ap.add_argument("--out", type=Path, default=Path("results/ccp_variability.json"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    rows = {}
    for seed in args.seeds:
        run = run_complete(seed, outlier_rate=args.outlier_rate)
        doc = {"ccp_test_accuracy": run.report.accuracy, **run.variability.summary()}
        line = (f"seed {seed}: CCP {run.variability.ccp_accuracy:.4f}, support sets "
                f"{run.variability.mean:.4f} +- {run.variability.std:.4f}")
        if args.baseline:
            doc["supervised_accuracy"] = run_baseline(run).accuracy
            line += f", supervised {doc['supervised_accuracy']:.4f}"
        rows[seed] = doc
        print(line)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
