"""Evaluation protocols, metrics and report exports."""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from hsiproto.attnembed import EmbeddingNet, attention_batch, cubes_to_tensor, embed_batch
from hsiproto.cubeio import DatasetManifest
from hsiproto.errors import CompatibilityError, ProtocolError, TrainingError
from hsiproto.fewshot import (
    CCPBank,
    Episode,
    PrototypeSet,
    classify,
    draw_support,
    prototypes_for,
)


@dataclass(eq=False)
class EvalReport:
    """Confusion counts (rows = truth, columns = prediction) plus context."""

    classes: tuple
    class_indices: tuple
    counts: np.ndarray
    protocol: str
    seed: int | None = None
    digest: str = ""
    timing: float = 0.0
    query_idents: tuple = ()
    predictions: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def per_class_accuracy(self) -> dict[str, float]:
        out = {}
        for k, name in enumerate(self.classes):
            n = self.counts[k].sum()
            if n:
                out[name] = float(self.counts[k, k] / n)
        return out

    def percentages(self) -> np.ndarray:
        """Row-normalised confusion in percent; rows without queries stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(100.0 * self.counts, rows, out=np.zeros(self.counts.shape),
                         where=rows > 0)

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "total": self.total,
            "classes": list(self.classes),
            "per_class_accuracy": self.per_class_accuracy(),
            "counts": self.counts.tolist(),
            "seed": self.seed,
            "digest": self.digest,
            **self.extra,
        }


@dataclass
class VariabilityReport:
    per_set: list
    ccp_accuracy: float
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        acc = np.asarray(self.per_set, dtype=np.float64)
        self.mean = float(acc.mean())
        self.std = float(acc.std())

    def summary(self) -> dict:
        return {"per_set": list(self.per_set), "mean": self.mean, "std": self.std,
                "ccp_accuracy": self.ccp_accuracy, "n_sets": len(self.per_set)}


def confusion_counts(truth: Sequence[int], pred: Sequence[int],
                     class_indices: Sequence[int]) -> np.ndarray:
    pos = {k: i for i, k in enumerate(class_indices)}
    counts = np.zeros((len(pos), len(pos)), dtype=np.int64)
    for t, p in zip(truth, pred):
        if t not in pos or p not in pos:
            raise ProtocolError(f"class index {t if t not in pos else p} outside the "
                                "candidate set")
        counts[pos[t], pos[p]] += 1
    return counts


def _report(manifest: DatasetManifest, items, pred, classes_idx, protocol, net, t0, **extra):
    classes_idx = tuple(sorted(classes_idx))
    truth = [it.index for it in items]
    return EvalReport(
        classes=tuple(manifest.classes[k] for k in classes_idx),
        class_indices=classes_idx,
        counts=confusion_counts(truth, [int(p) for p in pred], classes_idx),
        protocol=protocol,
        digest=net.digest(),
        timing=time.perf_counter() - t0,
        query_idents=tuple(it.ident for it in items),
        predictions=tuple(int(p) for p in pred),
        extra=extra,
    )


def _check_disjoint(support_idents: Iterable[str], query_idents: Iterable[str]):
    overlap = set(support_idents) & set(query_idents)
    if overlap:
        raise ProtocolError(f"{len(overlap)} cubes appear in both support and query, "
                            f"e.g. {sorted(overlap)[0]!r}")


# ---------------------------------------------------------------------------
# complete-class protocol


def eval_complete(test_manifest: DatasetManifest, params: EmbeddingNet, bank: CCPBank,
                  attention: bool | None = None, metric: str = "sqeuclidean") -> EvalReport:
    """Classify every test cube against the CCP bank."""
    t0 = time.perf_counter()
    if bank.digest != params.digest():
        raise CompatibilityError("CCP bank was built with a different checkpoint")
    present = [c for c, n in test_manifest.counts().items() if n]
    missing = [c for c in present if c not in bank.classes]
    if missing:
        raise ProtocolError(f"test classes {missing} have no collective prototype")
    items = list(test_manifest.items)
    emb = embed_batch([it.cube for it in items], params, attention)
    pred = classify(emb, bank, metric)
    return _report(test_manifest, items, pred, bank.class_indices, "complete", params, t0)


def eval_with_support_sets(test_manifest: DatasetManifest, params: EmbeddingNet,
                           episodes: Sequence[Episode], bank: CCPBank | None = None,
                           attention: bool | None = None) -> VariabilityReport:
    """Accuracy with each episode's support prototypes, and with the CCPs.

    Without ``bank`` the CCPs are the average of the given episodes' prototypes.
    """
    items = list(test_manifest.items)
    idents = [it.ident for it in items]
    for ep in episodes:
        _check_disjoint((c.ident for s in ep.support for c in s), idents)
    emb = embed_batch([it.cube for it in items], params, attention)
    truth = np.array([it.index for it in items])
    protos = prototypes_for(params, episodes, attention)
    per_set = [float((classify(emb, p) == truth).mean()) for p in protos]
    if bank is None:
        bank = PrototypeSet(np.mean([p.vectors for p in protos], axis=0),
                            protos[0].class_indices)
    ccp_acc = float((classify(emb, bank) == truth).mean())
    return VariabilityReport(per_set, ccp_acc)


# ---------------------------------------------------------------------------
# partial-class protocols


def _restrict(support: Episode, classes: Sequence[str]) -> Episode:
    keep = [support.classes.index(c) for c in classes]
    return Episode(tuple(support.classes[i] for i in keep),
                   tuple(support.class_indices[i] for i in keep),
                   [support.support[i] for i in keep], (), support.episode_id)


def _partial(test_manifest, params, excluded, support, candidates, protocol, attention):
    t0 = time.perf_counter()
    excluded = list(excluded)
    for c in excluded:
        test_manifest.class_index(c)
    items = [it for it in test_manifest.items if it.label in excluded]
    if not items:
        raise ProtocolError(f"no test cubes for excluded classes {excluded}")
    _check_disjoint((c.ident for s in support.support for c in s), (it.ident for it in items))
    cand = _restrict(support, candidates)
    protos = prototypes_for(params, [cand], attention)[0]
    emb = embed_batch([it.cube for it in items], params, attention)
    pred = classify(emb, protos)
    return _report(test_manifest, items, pred, cand.class_indices, protocol, params, t0,
                   excluded=excluded, candidates=list(candidates))


def eval_partial_strategy1(test_manifest: DatasetManifest, params: EmbeddingNet,
                           excluded_classes: Sequence[str], support: Episode,
                           attention: bool | None = None) -> EvalReport:
    """Excluded-class queries against excluded-class prototypes only."""
    if set(support.classes) != set(excluded_classes):
        raise ProtocolError(f"strategy 1 support must cover exactly {list(excluded_classes)}, "
                            f"got {list(support.classes)}")
    return _partial(test_manifest, params, excluded_classes, support,
                    list(support.classes), "partial-s1", attention)


def eval_partial_strategy2(test_manifest: DatasetManifest, params: EmbeddingNet,
                           excluded_classes: Sequence[str], support: Episode,
                           candidates: Sequence[str] | None = None,
                           attention: bool | None = None) -> EvalReport:
    """Excluded-class queries against prototypes of every supported class."""
    missing = set(excluded_classes) - set(support.classes)
    if missing:
        raise ProtocolError(f"strategy 2 support lacks excluded classes {sorted(missing)}")
    if candidates is None:
        candidates = list(support.classes)
    if not set(excluded_classes) <= set(candidates) <= set(support.classes):
        raise ProtocolError("candidates must include the excluded classes and lie in the support")
    return _partial(test_manifest, params, excluded_classes, support,
                    [c for c in support.classes if c in set(candidates)], "partial-s2", attention)


@dataclass
class PartialResult:
    excluded: list
    strategy1: list
    strategy2: list

    @staticmethod
    def _stats(reports):
        acc = np.array([r.accuracy for r in reports])
        return float(acc.mean()), float(acc.std())

    def summary(self) -> dict:
        m1, s1 = self._stats(self.strategy1)
        m2, s2 = self._stats(self.strategy2)
        pct2 = np.sum([r.counts for r in self.strategy2], axis=0)
        return {
            "excluded": self.excluded,
            "repetitions": len(self.strategy1),
            "strategy1": {"mean": m1, "std": s1,
                          "per_draw": [r.accuracy for r in self.strategy1]},
            "strategy2": {"mean": m2, "std": s2,
                          "per_draw": [r.accuracy for r in self.strategy2],
                          "classes": list(self.strategy2[0].classes),
                          "pooled_counts": pct2.tolist()},
        }


def run_partial(train_manifest: DatasetManifest, test_manifest: DatasetManifest,
                params: EmbeddingNet, excluded_classes: Sequence[str], shot: int = 5,
                repetitions: int = 20, seed: int = 0,
                attention: bool | None = None) -> PartialResult:
    """Paired strategy 1 / strategy 2 evaluation over random support draws.

    Each draw takes ``shot`` training-split cubes of every class; strategy 1
    uses the excluded classes' part of the same draw.
    """
    excluded = list(excluded_classes)
    classes = [c for c, n in train_manifest.counts().items() if n]
    s1, s2 = [], []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        support = draw_support(train_manifest, classes, shot, rng, rep)
        s1.append(eval_partial_strategy1(test_manifest, params, excluded,
                                         _restrict(support, excluded), attention))
        s2.append(eval_partial_strategy2(test_manifest, params, excluded, support,
                                         attention=attention))
        s1[-1].seed = s2[-1].seed = rep
    return PartialResult(excluded, s1, s2)


# ---------------------------------------------------------------------------
# supervised baseline


class LinearHead(nn.Linear):
    """Linear classifier whose output columns map to ``class_indices``."""

    def __init__(self, dim: int, class_indices: Sequence[int]):
        super().__init__(dim, len(class_indices))
        self.class_indices = tuple(class_indices)


@dataclass(frozen=True)
class BaselineHyper:
    epochs: int = 100
    lr: float = 3e-3
    batch_size: int = 40
    seed: int = 0
    attention: bool = True


def train_supervised_baseline(manifest: DatasetManifest, params_init: EmbeddingNet,
                              hyper: BaselineHyper) -> tuple[EmbeddingNet, LinearHead]:
    """Cross-entropy training of the embedding plus a linear head, same backbone."""
    net = copy.deepcopy(params_init)
    present = [k for k, c in enumerate(manifest.classes) if manifest.counts()[c]]
    remap = {k: i for i, k in enumerate(present)}
    head = LinearHead(net.config.embedding_dim, present)
    # zero head: initial logits are all equal, so early steps cannot blow up
    # on the large common-mode component of freshly initialised embeddings
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()

    items = list(manifest.items)
    x = cubes_to_tensor([it.cube for it in items])
    y = torch.tensor([remap[it.index] for it in items])
    # Adam: plain SGD on a linear head converges erratically from a fresh backbone
    opt = torch.optim.Adam([*net.parameters(), *head.parameters()], lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    for epoch in range(hyper.epochs):
        order = torch.from_numpy(rng.permutation(len(items)))
        for start in range(0, len(items), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss = F.cross_entropy(head(net(x[idx], hyper.attention)), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"baseline diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net, head


def eval_supervised(test_manifest: DatasetManifest, net: EmbeddingNet, head: LinearHead,
                    attention: bool | None = None) -> EvalReport:
    t0 = time.perf_counter()
    items = list(test_manifest.items)
    emb = torch.from_numpy(embed_batch([it.cube for it in items], net, attention))
    with torch.no_grad():
        cols = head(emb).argmax(dim=1).numpy()
    present = np.asarray(head.class_indices)
    return _report(test_manifest, items, present[cols], present, "supervised", net, t0)


# ---------------------------------------------------------------------------
# exports


def confusion_difference(a: EvalReport, b: EvalReport) -> np.ndarray:
    """Percentage confusion of ``a`` minus that of ``b``."""
    if a.classes != b.classes or a.counts.shape != b.counts.shape:
        raise ValueError(f"cannot compare confusion matrices over {list(a.classes)} "
                         f"and {list(b.classes)}")
    return a.percentages() - b.percentages()


def export_confusion(report: EvalReport, path, compare_to: EvalReport | None = None) -> None:
    """CSV with ``count`` and ``percent`` blocks, plus ``difference`` if requested."""
    blocks = [("count", report.counts), ("percent", report.percentages())]
    if compare_to is not None:
        blocks.append(("difference", confusion_difference(report, compare_to)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "truth", *report.classes])
        for kind, mat in blocks:
            for name, row in zip(report.classes, mat):
                w.writerow([kind, name, *(repr(float(v)) if kind != "count" else int(v)
                                          for v in row)])


def read_confusion(path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return {k: np.array(v) for k, v in out.items()}


def export_attention_heatmap(test_manifest: DatasetManifest,
                             params: EmbeddingNet) -> tuple[list[str], np.ndarray]:
    """Mean attention weight per (class, channel) over the manifest's cubes."""
    if not params.config.attention:
        raise ProtocolError("attention heatmap requested for a network without attention")
    classes, rows = [], []
    for name, members in test_manifest.by_class().items():
        if members:
            classes.append(name)
            rows.append(attention_batch([m.cube for m in members], params).mean(axis=0))
    return classes, np.stack(rows)


def write_matrix(path, row_names: Sequence[str], matrix: np.ndarray, header=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(["row", *header])
        for name, row in zip(row_names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


def bank_rows(bank) -> list[tuple[str, str, np.ndarray]]:
    names = getattr(bank, "classes", None) or [str(k) for k in bank.class_indices]
    return [(f"ccp:{n}", n, v) for n, v in zip(names, bank.vectors)]


def prototype_rows(prototypes: Sequence[PrototypeSet],
                   registry: Sequence[str]) -> list[tuple[str, str, np.ndarray]]:
    return [(f"proto:{p.episode_id}:{registry[k]}", registry[k], v)
            for p in prototypes for k, v in zip(p.class_indices, p.vectors)]


def manifest_rows(manifest: DatasetManifest, params: EmbeddingNet,
                  attention: bool | None = None) -> list[tuple[str, str, np.ndarray]]:
    emb = embed_batch([it.cube for it in manifest.items], params, attention)
    return [(it.ident, it.label, v) for it, v in zip(manifest.items, emb)]


def export_embeddings(rows: Iterable[tuple[str, str, np.ndarray]], path) -> None:
    """Delimited rows ``identifier, class, v_1 .. v_D``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for ident, label, vec in rows:
            w.writerow([ident, label, *(repr(float(v)) for v in vec)])


def read_embeddings(path) -> list[tuple[str, str, np.ndarray]]:
    with open(path, newline="") as fh:
        return [(r[0], r[1], np.array([float(v) for v in r[2:]])) for r in csv.reader(fh)]


def write_summary(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
