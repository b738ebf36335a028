"""Desk-scale synthetic experiments shared by the acceptance suite and scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from hsiproto.attnembed import EmbedConfig, EmbeddingNet
from hsiproto.cubeio import DatasetManifest
from hsiproto.evalsuite import (
    BaselineHyper,
    EvalReport,
    PartialResult,
    VariabilityReport,
    eval_complete,
    eval_supervised,
    eval_with_support_sets,
    run_partial,
    train_supervised_baseline,
)
from hsiproto.fewshot import CCPBank, Episode, TrainHyper, TrainLog, build_ccp, train
from hsiproto.synthgen import SynthConfig, gen_datasets

# 8 classes x 45 cubes (30 train = 2 episodes of 5+10, 15 test), 16x16x32
DESK_SYNTH = SynthConfig(num_classes=8, cubes_per_class=45, height=16, width=16, channels=32,
                         separation=0.5, noise_sigma=0.05, cube_jitter=0.1,
                         texture_scale=0.1, per_class_train=30)
DESK_EPOCHS = 30


def desk_embed_config(channels: int, seed: int, attention: bool = True) -> EmbedConfig:
    return EmbedConfig(channels=channels, reduction=16, down_channels=3, widths=(16, 32),
                       blocks_per_stage=2, embedding_dim=64, attention=attention, seed=seed)


@dataclass
class CompleteRun:
    train: DatasetManifest
    test: DatasetManifest
    net: EmbeddingNet
    log: TrainLog
    bank: CCPBank
    report: EvalReport
    variability: VariabilityReport
    seconds: float


def run_complete(seed: int, outlier_rate: float = 0.0, attention: bool = True,
                 epochs: int = DESK_EPOCHS, synth: SynthConfig = DESK_SYNTH,
                 lr: float = 1e-3) -> CompleteRun:
    t0 = time.perf_counter()
    train_m, test_m = gen_datasets(replace(synth, seed=seed, outlier_rate=outlier_rate))
    net0 = EmbeddingNet(desk_embed_config(synth.channels, seed, attention))
    hyper = TrainHyper(epochs=epochs, lr=lr, seed=seed, attention=attention)
    net, log = train(train_m, net0, hyper)
    bank = build_ccp(log, train_m.classes)
    report = eval_complete(test_m, net, bank)
    report.seed = seed
    episodes = _best_episodes(train_m, log)
    variability = eval_with_support_sets(test_m, net, episodes, bank)
    return CompleteRun(train_m, test_m, net, log, bank, report, variability,
                       time.perf_counter() - t0)


def _best_episodes(manifest: DatasetManifest, log: TrainLog):
    """Rebuild the best epoch's support sets from the identifiers in ``log``."""
    lookup = {it.ident: it for it in manifest.items}
    return [Episode(log.classes, log.class_indices,
                    [[lookup[i] for i in group] for group in ep], (), e)
            for e, ep in enumerate(log.support_idents)]


def run_baseline(run: CompleteRun, epochs: int = 100, lr: float = 3e-3,
                 seed: int | None = None) -> EvalReport:
    seed = run.log.seed if seed is None else seed
    net0 = EmbeddingNet(desk_embed_config(run.train.channels, seed,
                                          run.net.config.attention))
    net, head = train_supervised_baseline(
        run.train, net0, BaselineHyper(epochs=epochs, lr=lr, seed=seed,
                                       attention=run.net.config.attention))
    return eval_supervised(run.test, net, head)


def run_partial_experiment(seed: int, excluded=("class6", "class7"), repetitions: int = 20,
                           epochs: int = DESK_EPOCHS, synth: SynthConfig = DESK_SYNTH,
                           lr: float = 1e-3) -> tuple[PartialResult, EmbeddingNet]:
    train_m, test_m = gen_datasets(replace(synth, seed=seed))
    trained = [c for c in train_m.classes if c not in set(excluded)]
    net0 = EmbeddingNet(desk_embed_config(synth.channels, seed))
    net, _ = train(train_m, net0, TrainHyper(epochs=epochs, lr=lr, seed=seed,
                                             classes=tuple(trained)))
    return run_partial(train_m, test_m, net, excluded, shot=5, repetitions=repetitions,
                       seed=seed), net

