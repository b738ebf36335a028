"""Partial-class runs: train on six classes, evaluate the two held out.

Strategy 1 restricts candidates to the held-out classes; strategy 2 lets
them compete with every class. Both use the same 20 support draws.
"""

import argparse
import json
from pathlib import Path

import torch

from hsiproto.experiments import run_partial_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--exclude", default="class6,class7")
    ap.add_argument("--repetitions", type=int, default=20)
    ap.add_argument("--out", type=Path, default=Path("results/partial.json"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    excluded = tuple(args.exclude.split(","))
    rows = {}
    for seed in args.seeds:
        result, _ = run_partial_experiment(seed, excluded, args.repetitions)
        doc = result.summary()
        rows[seed] = doc
        print(f"seed {seed}: strategy 1 {doc['strategy1']['mean']:.4f} "
              f"+- {doc['strategy1']['std']:.4f}, strategy 2 {doc['strategy2']['mean']:.4f} "
              f"+- {doc['strategy2']['std']:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
