"""Complete-class ablation on synthetic data.

Three configurations per seed: all channels with attention, all channels
without attention, and channels average-reduced by a factor of two with
attention. Writes a JSON table and prints one line per run.

    python scripts/ablation.py --seeds 0 1 2 --out results/ablation.json
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from hsiproto.attnembed import EmbeddingNet
from hsiproto.cubeio import average_reduce_channels
from hsiproto.evalsuite import eval_complete
from hsiproto.experiments import DESK_EPOCHS, DESK_SYNTH, desk_embed_config
from hsiproto.fewshot import TrainHyper, build_ccp, train
from hsiproto.synthgen import gen_datasets

CONFIGS = {"full+attention": (1, True), "full-no-attention": (1, False),
           "reduced+attention": (2, True)}


def reduce_manifest(manifest, factor):
    items = [replace(it, cube=average_reduce_channels(it.cube, factor)) for it in manifest.items]
    return replace(manifest, items=tuple(items))


def run(seed, factor, attention, epochs):
    train_m, test_m = gen_datasets(replace(DESK_SYNTH, seed=seed))
    if factor > 1:
        train_m, test_m = reduce_manifest(train_m, factor), reduce_manifest(test_m, factor)
    net0 = EmbeddingNet(desk_embed_config(train_m.channels, seed, attention))
    net, log = train(train_m, net0, TrainHyper(epochs=epochs, seed=seed, attention=attention))
    return eval_complete(test_m, net, build_ccp(log)).accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=DESK_EPOCHS)
    ap.add_argument("--out", type=Path, default=Path("results/ablation.json"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    table = {}
    for name, (factor, attention) in CONFIGS.items():
        accs = [run(s, factor, attention, args.epochs) for s in args.seeds]
        table[name] = {"seeds": args.seeds, "accuracy": accs,
                       "mean": float(np.mean(accs)), "std": float(np.std(accs))}
        print(f"{name:20s} mean {np.mean(accs):.4f}  per seed {accs}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(table, indent=1) + "\n")


if __name__ == "__main__":
    main()
