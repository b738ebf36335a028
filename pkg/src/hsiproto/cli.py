"""``hsiproto`` command line: synth, prep, train, ccp, eval, report.

Every command writes ``results/<command>.json`` (resolved config, digests,
summary) and prints one summary line. Wall-clock timings go to
``results/<command>.timing.json`` so the result documents themselves are
reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from hsiproto.attnembed import EmbeddingNet, load_checkpoint, save_checkpoint
from hsiproto.config import PROTOCOLS, RunConfig, load_config, with_seed
from hsiproto.cubeio import (
    DatasetManifest,
    load_manifest,
    prepare_pool,
    save_manifest,
    split_dataset,
    write_items,
)
from hsiproto.errors import HsiError
from hsiproto.evalsuite import (
    EvalReport,
    bank_rows,
    eval_complete,
    eval_with_support_sets,
    export_attention_heatmap,
    export_confusion,
    export_embeddings,
    manifest_rows,
    prototype_rows,
    run_partial,
    write_matrix,
    write_summary,
)
from hsiproto.fewshot import Episode, TrainLog, build_ccp, load_ccp, save_ccp, train
from hsiproto.synthgen import gen_dataset

log = logging.getLogger("hsiproto")


class MissingArtifact(HsiError):
    pass


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; {hint}")
    return path


def _manifest(cfg: RunConfig, split: str) -> DatasetManifest:
    path = _require(cfg.paths.prepared / f"{split}.json", "run `hsiproto prep` first")
    return load_manifest(path)


def _checkpoint(cfg: RunConfig) -> tuple[EmbeddingNet, TrainLog]:
    model = cfg.paths.model
    tlog = TrainLog.load(_require(model / "trainlog.json", "run `hsiproto train` first"))
    net = load_checkpoint(_require(model / "checkpoint.npz", "run `hsiproto train` first"),
                          expected_digest=tlog.digest)
    return net, tlog


def _finish(cfg: RunConfig, command: str, summary: dict, digests: dict, line: str,
            seconds: float) -> dict:
    doc = {"command": command, "config": cfg.to_dict(), "digests": digests,
           "summary": summary}
    cfg.paths.results.mkdir(parents=True, exist_ok=True)
    write_summary(cfg.paths.results / f"{command}.json", doc)
    write_summary(cfg.paths.results / f"{command}.timing.json", {"seconds": seconds})
    print(f"{command}: {line}")
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    root = cfg.paths.data
    train_m, test_m = gen_dataset(cfg.synth, root)
    s = cfg.synth
    n = len(train_m) + len(test_m)
    return _finish(cfg, "synth",
                   {"cubes": n, "classes": list(train_m.classes),
                    "shape": [s.height, s.width, s.channels]},
                   {"pool": file_digest(root / "pool.json")},
                   f"{n} cubes, {s.num_classes} classes, {s.height}x{s.width}x{s.channels} "
                   f"-> {root}", time.perf_counter() - t0)


def cmd_prep(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    pool = load_manifest(_require(cfg.paths.data / "pool.json", "run `hsiproto synth` first"))
    crops = prepare_pool(pool.items, cfg.prep)
    prov = {"source": "data/pool.json",
            "pool_digest": file_digest(cfg.paths.data / "pool.json"),
            "prep": vars(cfg.prep)}
    train_m, test_m = split_dataset(crops, cfg.prep.per_class_train, cfg.prep.seed,
                                    pool.classes, prov)
    out = cfg.paths.prepared
    digests = {}
    for m in (train_m, test_m):
        items = write_items(m.items, out / "cubes")
        m = DatasetManifest(m.classes, items, m.split, m.provenance, m.balanced)
        save_manifest(m, out / f"{m.split}.json")
        digests[m.split] = file_digest(out / f"{m.split}.json")
    return _finish(cfg, "prep",
                   {"crops": len(crops), "train": len(train_m), "test": len(test_m),
                    "channels": train_m.channels},
                   digests,
                   f"{len(crops)} crops with {train_m.channels} channels, "
                   f"{len(train_m)} train / {len(test_m)} test", time.perf_counter() - t0)


def cmd_train(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    train_m = _manifest(cfg, "train")
    if train_m.channels != cfg.channels:
        raise MissingArtifact(f"prepared data has {train_m.channels} channels but the config "
                              f"implies {cfg.channels}; rerun `hsiproto prep`")
    net0 = EmbeddingNet(cfg.model.embed_config(train_m.channels, cfg.seed))
    hyper = replace(cfg.train, attention=cfg.model.attention,
                    classes=cfg.trained_classes)
    net, tlog = train(train_m, net0, hyper)
    model = cfg.paths.model
    model.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(net, model / "checkpoint.npz")
    tlog.save(model / "trainlog.json")
    tlog.export_records(model / "trainlog.jsonl")
    best = tlog.best_epoch
    return _finish(cfg, "train",
                   {"best_epoch": best, "best_loss": tlog.epoch_loss[best],
                    "epoch_loss": tlog.epoch_loss, "epoch_accuracy": tlog.epoch_accuracy,
                    "classes": list(tlog.classes), "parameters": net.num_parameters(),
                    "clamped": tlog.clamped},
                   {"checkpoint": digest, "train": file_digest(cfg.paths.prepared / "train.json")},
                   f"best epoch {best} loss {tlog.epoch_loss[best]:.4f} "
                   f"acc {tlog.epoch_accuracy[best]:.4f}", time.perf_counter() - t0)


def cmd_ccp(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    net, tlog = _checkpoint(cfg)
    train_m = _manifest(cfg, "train")
    bank = build_ccp(tlog, train_m.classes)
    save_ccp(bank, cfg.paths.model / "ccp.npz")
    return _finish(cfg, "ccp",
                   {"classes": list(bank.classes), "best_epoch": bank.best_epoch,
                    "episodes": bank.n_episodes, "dim": bank.dim},
                   {"checkpoint": net.digest(), "ccp": file_digest(cfg.paths.model / "ccp.npz")},
                   f"{len(bank.classes)} collective prototypes from {bank.n_episodes} "
                   f"episodes of epoch {bank.best_epoch}", time.perf_counter() - t0)


def _best_episodes(manifest: DatasetManifest, tlog: TrainLog) -> list[Episode]:
    lookup = {it.ident: it for it in manifest.items}
    return [Episode(tlog.classes, tlog.class_indices,
                    [[lookup[i] for i in group] for group in ep], (), e)
            for e, ep in enumerate(tlog.support_idents)]


def cmd_eval(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    protocol = cfg.eval.protocol
    net, tlog = _checkpoint(cfg)
    train_m, test_m = _manifest(cfg, "train"), _manifest(cfg, "test")
    digests = {"checkpoint": net.digest(), "test": file_digest(cfg.paths.prepared / "test.json")}
    if protocol == "complete":
        bank_path = _require(cfg.paths.model / "ccp.npz",
                             "complete-class evaluation needs the CCP bank; "
                             "run `hsiproto ccp` first")
        bank = load_ccp(bank_path, expected_digest=net.digest())
        report = eval_complete(test_m, net, bank)
        report.seed = cfg.seed
        variability = eval_with_support_sets(test_m, net, _best_episodes(train_m, tlog), bank)
        summary = {**report.summary(), "class_indices": list(report.class_indices),
                   "support_sets": variability.summary()}
        digests["ccp"] = file_digest(bank_path)
        line = (f"complete-class accuracy {report.accuracy:.4f} on {report.total} cubes "
                f"(support sets {variability.mean:.4f} +- {variability.std:.4f})")
    else:
        res = run_partial(train_m, test_m, net, cfg.eval.exclude, cfg.eval.shot,
                          cfg.eval.repetitions, cfg.seed)
        summary = res.summary()
        key = "strategy1" if protocol == "partial-s1" else "strategy2"
        reports = res.strategy1 if key == "strategy1" else res.strategy2
        first = reports[0]
        summary.update(protocol=protocol, accuracy=summary[key]["mean"],
                       classes=list(first.classes), class_indices=list(first.class_indices),
                       counts=np.sum([r.counts for r in reports], axis=0).tolist())
        line = (f"{protocol} mean accuracy {summary[key]['mean']:.4f} over "
                f"{cfg.eval.repetitions} draws (s1 {summary['strategy1']['mean']:.4f}, "
                f"s2 {summary['strategy2']['mean']:.4f})")
    cfg.paths.reports.mkdir(parents=True, exist_ok=True)
    write_summary(cfg.paths.reports / f"eval-{protocol}.json", summary)
    return _finish(cfg, "eval", summary, digests, line, time.perf_counter() - t0)


def _load_report(path: Path) -> EvalReport:
    doc = json.loads(path.read_text())
    return EvalReport(tuple(doc["classes"]), tuple(doc["class_indices"]),
                      np.asarray(doc["counts"], dtype=np.int64), doc["protocol"])


def cmd_report(cfg: RunConfig, compare: str | None = None) -> dict:
    t0 = time.perf_counter()
    protocol = cfg.eval.protocol
    reports = cfg.paths.reports
    report = _load_report(_require(reports / f"eval-{protocol}.json",
                                   f"run `hsiproto eval --protocol {protocol}` first"))
    other = None
    if compare is not None:
        other = _load_report(_require(Path(compare) / "reports" / f"eval-{protocol}.json",
                                      "evaluate the comparison run first"))
    export_confusion(report, reports / f"confusion-{protocol}.csv", compare_to=other)
    written = [f"confusion-{protocol}.csv"]

    net, tlog = _checkpoint(cfg)
    test_m = _manifest(cfg, "test")
    if net.config.attention:
        classes, matrix = export_attention_heatmap(test_m, net)
        write_matrix(reports / "attention.csv", classes, matrix,
                     header=[f"band{i}" for i in range(matrix.shape[1])])
        written.append("attention.csv")
    rows = manifest_rows(test_m, net) + prototype_rows(tlog.prototypes, test_m.classes)
    bank_path = cfg.paths.model / "ccp.npz"
    if bank_path.exists():
        rows += bank_rows(load_ccp(bank_path, expected_digest=net.digest()))
    export_embeddings(rows, reports / "embeddings.csv")
    written.append("embeddings.csv")
    digests = {name: file_digest(reports / name) for name in written}
    return _finish(cfg, "report", {"files": written, "accuracy": report.accuracy}, digests,
                   f"wrote {', '.join(written)} to {reports}", time.perf_counter() - t0)


COMMANDS = {"synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "ccp": cmd_ccp,
            "eval": cmd_eval, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--attention", choices=("on", "off"))
    common.add_argument("--channels", type=int, help="channel count of synthesised cubes")
    common.add_argument("--reduce-factor", type=int)
    common.add_argument("--protocol", choices=PROTOCOLS)
    common.add_argument("--exclude", help="comma-separated class names left out of training")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="hsiproto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("--compare", help="another run directory for a difference matrix")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.attention is not None:
        cfg = replace(cfg, model=replace(cfg.model, attention=args.attention == "on"))
    if args.channels is not None:
        cfg = replace(cfg, synth=replace(cfg.synth, channels=args.channels))
    if args.reduce_factor is not None:
        cfg = replace(cfg, prep=replace(cfg.prep, reduce_factor=args.reduce_factor))
    if args.protocol is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, protocol=args.protocol))
    if args.exclude is not None:
        names = tuple(c for c in args.exclude.split(",") if c)
        cfg = replace(cfg, eval=replace(cfg.eval, exclude=names))
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        if args.command == "report":
            cmd_report(cfg, args.compare)
        else:
            COMMANDS[args.command](cfg)
    except (HsiError, ValueError, OSError) as exc:
        print(f"hsiproto {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
