"""Prototypical-network core: episodes, prototypes, posterior, training and
collective class prototypes (CCPs)."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from hsiproto.attnembed import EmbeddingNet, cubes_to_tensor, embed_batch
from hsiproto.cubeio import DatasetManifest, LabeledCube, save_npz
from hsiproto.errors import CompatibilityError, TrainingError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CCP_VERSION = 1


@dataclass(frozen=True, eq=False)
class Episode:
    """Support (``shot`` per class) and query (``query_size`` per class) cubes."""

    classes: tuple
    class_indices: tuple
    support: tuple
    query: tuple = ()
    episode_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "class_indices", tuple(int(k) for k in self.class_indices))
        support = tuple(tuple(s) for s in self.support)
        query = tuple(tuple(q) for q in self.query) or tuple(() for _ in support)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "query", query)
        if not (len(self.classes) == len(self.class_indices) == len(support) == len(query)):
            raise ValueError("episode classes, support and query lengths differ")
        if len({len(s) for s in support}) > 1 or len({len(q) for q in query}) > 1:
            raise ValueError("every class must contribute the same number of cubes")
        sup_ids = [c.ident for s in support for c in s]
        qry_ids = [c.ident for q in query for c in q]
        if len(set(sup_ids)) != len(sup_ids) or len(set(qry_ids)) != len(qry_ids):
            raise ValueError("episode contains duplicate cubes")
        if set(sup_ids) & set(qry_ids):
            raise ValueError("support and query overlap")

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return len(self.support[0]) if self.support else 0

    @property
    def query_size(self) -> int:
        return len(self.query[0]) if self.query else 0

    def support_idents(self) -> list[list[str]]:
        return [[c.ident for c in s] for s in self.support]

    def member_idents(self) -> set[str]:
        return {c.ident for group in (*self.support, *self.query) for c in group}


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    vectors: np.ndarray
    class_indices: tuple
    episode_id: int = 0

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.class_indices):
            raise ValueError("one prototype row per class index required")
        if not np.all(np.isfinite(vec)):
            raise ValueError("prototypes must be finite")
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "class_indices", tuple(int(k) for k in self.class_indices))


@dataclass(frozen=True, eq=False)
class CCPBank:
    """Collective class prototypes of a trained network."""

    vectors: np.ndarray
    classes: tuple
    class_indices: tuple
    best_epoch: int
    n_episodes: int
    digest: str

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.classes) or len(self.classes) == 0:
            raise ValueError("CCP bank needs one row per class")
        if not np.all(np.isfinite(vec)):
            raise ValueError("CCPs must be finite")
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "class_indices", tuple(int(k) for k in self.class_indices))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def equals(self, other: "CCPBank") -> bool:
        return (np.array_equal(self.vectors, other.vectors) and self.classes == other.classes
                and self.class_indices == other.class_indices
                and self.best_epoch == other.best_epoch
                and self.n_episodes == other.n_episodes and self.digest == other.digest)


# ---------------------------------------------------------------------------
# episodes


def sample_episodes(manifest: DatasetManifest, way: int | None, shot: int, query: int,
                    seed: int, classes: Sequence[str] | None = None) -> list[Episode]:
    """Partition every selected class into disjoint ``shot + query`` episodes."""
    groups = manifest.by_class()
    if classes is None:
        classes = [c for c in manifest.classes if groups[c]]
    classes = list(classes)
    if way is None:
        way = len(classes)
    if way != len(classes):
        raise ValueError(f"way={way} but {len(classes)} classes selected; restrict the "
                         "manifest or pass the class list explicitly")
    if shot < 1 or query < 0:
        raise ValueError("shot must be >= 1 and query >= 0")
    size = shot + query
    for c in classes:
        manifest.class_index(c)
    counts = {c: len(groups[c]) for c in classes}
    if len(set(counts.values())) != 1:
        raise ValueError(f"selected classes have unequal cardinality: {counts}")
    n = next(iter(counts.values()))
    if n == 0 or n % size:
        lower = n // size * size
        raise ValueError(
            f"{n} cubes per class is not divisible by shot+query={size}; "
            f"use {lower or size} or {lower + size} cubes per class")
    rng = np.random.default_rng(seed)
    perms = {c: rng.permutation(n) for c in classes}
    indices = tuple(manifest.class_index(c) for c in classes)
    episodes = []
    for e in range(n // size):
        support, qry = [], []
        for c in classes:
            members = [groups[c][i] for i in perms[c][e * size:(e + 1) * size]]
            support.append(members[:shot])
            qry.append(members[shot:])
        episodes.append(Episode(tuple(classes), indices, support, qry, e))
    return episodes


def draw_support(manifest: DatasetManifest, classes: Sequence[str], shot: int,
                 rng: np.random.Generator, episode_id: int = 0) -> Episode:
    """Support-only episode with ``shot`` random cubes of each class."""
    groups = manifest.by_class()
    support = []
    for c in classes:
        pool = groups[c]
        if len(pool) < shot:
            raise ValueError(f"class {c!r} has {len(pool)} cubes, need {shot} for support")
        support.append([pool[i] for i in rng.choice(len(pool), size=shot, replace=False)])
    return Episode(tuple(classes), tuple(manifest.class_index(c) for c in classes),
                   support, (), episode_id)


# ---------------------------------------------------------------------------
# prototypes, distances, posterior, loss


def compute_prototypes(support_embeddings: Sequence[np.ndarray],
                       class_indices: Sequence[int] | None = None,
                       episode_id: int = 0) -> PrototypeSet:
    """Mean embedding of each class's support points."""
    rows = []
    for k, emb in enumerate(support_embeddings):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError(f"class {k} has no support embeddings")
        rows.append(emb.mean(axis=0))
    if class_indices is None:
        class_indices = range(len(rows))
    return PrototypeSet(np.stack(rows), tuple(class_indices), episode_id)


def sq_distances(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    p = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if q.shape[1] != p.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != prototype width {p.shape[1]}")
    diff = q[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def class_posterior(distances: np.ndarray) -> np.ndarray:
    """Row-wise softmax over negative distances."""
    logits = -np.atleast_2d(np.asarray(distances, dtype=np.float64))
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def episode_loss(posterior: np.ndarray, true_labels: Sequence[int]) -> float:
    """Mean negative log-probability of the true class."""
    posterior = np.atleast_2d(posterior)
    labels = np.asarray(true_labels, dtype=int)
    if labels.shape != (posterior.shape[0],):
        raise ValueError("one label per posterior row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= posterior.shape[1]:
        raise ValueError("label outside the posterior's columns")
    p = posterior[np.arange(labels.size), labels]
    clamped = int((p < PROB_FLOOR).sum())
    if clamped:
        log.warning("episode_loss: %d true-class probabilities clamped at %g",
                    clamped, PROB_FLOOR)
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def _bank_arrays(bank) -> tuple[np.ndarray, np.ndarray]:
    vectors = np.asarray(bank.vectors, dtype=np.float64)
    idx = np.asarray(bank.class_indices, dtype=int)
    if vectors.shape[0] == 0:
        raise ValueError("empty prototype bank")
    return vectors, idx


def classify(query_embeddings: np.ndarray, bank, metric: str = "sqeuclidean") -> np.ndarray:
    """Class index of the nearest prototype; ties go to the lowest class index."""
    vectors, idx = _bank_arrays(bank)
    order = np.argsort(idx, kind="stable")
    d = sq_distances(query_embeddings, vectors[order])
    if metric == "euclidean":
        d = np.sqrt(d)
    elif metric != "sqeuclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return idx[order][np.argmin(d, axis=1)]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainHyper:
    way: int | None = None
    shot: int = 5
    query: int = 10
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    attention: bool = True
    metric: str = "sqeuclidean"
    repartition: bool = False
    classes: tuple | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.shot < 1 or self.query < 1:
            raise ValueError("epochs, shot and query must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.metric not in ("sqeuclidean", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(self.classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = None if self.classes is None else list(self.classes)
        return d


@dataclass
class TrainLog:
    classes: tuple
    class_indices: tuple
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    records: list = field(default_factory=list)
    best_epoch: int = -1
    prototypes: list = field(default_factory=list)
    support_idents: list = field(default_factory=list)
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    clamped: int = 0
    digest: str = ""

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "class_indices": list(self.class_indices),
            "epoch_loss": self.epoch_loss,
            "epoch_accuracy": self.epoch_accuracy,
            "records": self.records,
            "best_epoch": self.best_epoch,
            "prototypes": [{"episode_id": p.episode_id, "class_indices": list(p.class_indices),
                            "vectors": p.vectors.tolist()} for p in self.prototypes],
            "support_idents": self.support_idents,
            "seed": self.seed,
            "hyper": self.hyper,
            "clamped": self.clamped,
            "digest": self.digest,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainLog":
        protos = [PrototypeSet(np.array(p["vectors"]), tuple(p["class_indices"]),
                               p["episode_id"]) for p in doc["prototypes"]]
        return cls(tuple(doc["classes"]), tuple(doc["class_indices"]), doc["epoch_loss"],
                   doc["epoch_accuracy"], doc["records"], doc["best_epoch"], protos,
                   doc["support_idents"], doc["seed"], doc["hyper"], doc["clamped"],
                   doc["digest"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        return cls.from_json(json.loads(Path(path).read_text()))

    def export_records(self, path) -> None:
        """One JSON object per line: epoch, episode, loss, accuracy."""
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _episode_tensors(ep: Episode, dtype) -> torch.Tensor:
    cubes = [c.cube for group in (*ep.support, *ep.query) for c in group]
    return cubes_to_tensor(cubes, dtype)


def _pairwise(q: torch.Tensor, p: torch.Tensor, metric: str) -> torch.Tensor:
    d = ((q[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    if metric == "euclidean":
        d = torch.sqrt(d.clamp_min(1e-12))
    return d


def episode_forward(net: EmbeddingNet, ep: Episode, x: torch.Tensor, attention: bool,
                    metric: str = "sqeuclidean"):
    """Returns (loss, accuracy, clamped count) for one episode's queries."""
    way, shot, nq = ep.way, ep.shot, ep.query_size
    emb = net(x, attention)
    protos = emb[:way * shot].reshape(way, shot, -1).mean(dim=1)
    queries = emb[way * shot:]
    dist = _pairwise(queries, protos, metric)
    logp = F.log_softmax(-dist, dim=1)
    truth = torch.arange(way).repeat_interleave(nq)
    lp_true = logp[torch.arange(truth.numel()), truth]
    floor = math.log(PROB_FLOOR)
    clamped = int((lp_true < floor).sum())
    loss = -lp_true.clamp_min(floor).mean()
    with torch.no_grad():
        acc = float((dist.argmin(dim=1) == truth).double().mean())
    return loss, acc, clamped


def prototypes_for(net: EmbeddingNet, episodes: Sequence[Episode],
                   attention: bool | None = None) -> list[PrototypeSet]:
    """Support prototypes of each episode under the given (frozen) network."""
    out = []
    for ep in episodes:
        per_class = [embed_batch([c.cube for c in s], net, attention) for s in ep.support]
        out.append(compute_prototypes(per_class, ep.class_indices, ep.episode_id))
    return out


def train(manifest: DatasetManifest, params: EmbeddingNet,
          hyper: TrainHyper) -> tuple[EmbeddingNet, TrainLog]:
    """Episodic SGD on the query NLL.

    Returns a copy of the network holding the weights at the end of the best
    epoch (lowest mean query loss, earliest on ties) and a log whose
    prototypes are recomputed for every episode with those weights.
    """
    net = copy.deepcopy(params)
    net.train()
    dtype = next(net.parameters()).dtype
    rng = np.random.default_rng(hyper.seed)
    episodes = sample_episodes(manifest, hyper.way, hyper.shot, hyper.query,
                               int(rng.integers(2**31)), hyper.classes)
    ep0 = episodes[0]
    tlog = TrainLog(ep0.classes, ep0.class_indices, seed=hyper.seed, hyper=hyper.to_dict())
    cache = {id(ep): _episode_tensors(ep, dtype) for ep in episodes}
    opt = torch.optim.SGD(net.parameters(), lr=hyper.lr, momentum=hyper.momentum)

    best_loss, best_state, best_episodes = math.inf, None, episodes
    for epoch in range(hyper.epochs):
        if hyper.repartition and epoch > 0:
            episodes = sample_episodes(manifest, hyper.way, hyper.shot, hyper.query,
                                       int(rng.integers(2**31)), hyper.classes)
            cache = {id(ep): _episode_tensors(ep, dtype) for ep in episodes}
        losses, accs = [], []
        for pos in rng.permutation(len(episodes)):
            ep = episodes[pos]
            loss, acc, clamped = episode_forward(net, ep, cache[id(ep)], hyper.attention,
                                                 hyper.metric)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, episode {ep.episode_id}")
            if clamped:
                log.warning("epoch %d episode %d: %d probabilities clamped",
                            epoch, ep.episode_id, clamped)
                tlog.clamped += clamped
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append(acc)
            tlog.records.append({"epoch": epoch, "episode": ep.episode_id,
                                 "loss": losses[-1], "accuracy": acc})
        mean_loss = float(np.mean(losses))
        tlog.epoch_loss.append(mean_loss)
        tlog.epoch_accuracy.append(float(np.mean(accs)))
        log.info("epoch %d loss %.4f acc %.4f", epoch, mean_loss, tlog.epoch_accuracy[-1])
        if mean_loss < best_loss:
            best_loss, tlog.best_epoch = mean_loss, epoch
            best_state = copy.deepcopy(net.state_dict())
            best_episodes = episodes

    net.load_state_dict(best_state)
    net.eval()
    tlog.prototypes = prototypes_for(net, best_episodes, hyper.attention)
    tlog.support_idents = [ep.support_idents() for ep in best_episodes]
    tlog.digest = net.digest()
    return net, tlog


# ---------------------------------------------------------------------------
# collective class prototypes


def build_ccp(log: TrainLog, registry: Sequence[str] | None = None) -> CCPBank:
    """Average each class's prototypes over the best epoch's episodes."""
    if not log.prototypes:
        raise ValueError("training log holds no prototype snapshots")
    stack = np.stack([p.vectors for p in log.prototypes])
    for p in log.prototypes:
        if p.class_indices != tuple(log.class_indices):
            raise ValueError("prototype snapshots disagree on class order")
    if registry is not None:
        registry = list(registry)
        for name, k in zip(log.classes, log.class_indices):
            if k >= len(registry) or registry[k] != name:
                raise ValueError(f"class {name!r} (index {k}) not found in registry")
    return CCPBank(stack.mean(axis=0), log.classes, log.class_indices, log.best_epoch,
                   len(log.prototypes), log.digest)


def save_ccp(bank: CCPBank, path) -> None:
    meta = {
        "format_version": CCP_VERSION,
        "classes": list(bank.classes),
        "class_indices": list(bank.class_indices),
        "dim": bank.dim,
        "best_epoch": bank.best_epoch,
        "n_episodes": bank.n_episodes,
        "digest": bank.digest,
    }
    save_npz(path, {"__meta__": np.array(json.dumps(meta, sort_keys=True)),
                    "vectors": bank.vectors})


def load_ccp(path, expected_digest: str | None = None) -> CCPBank:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        vectors = npz["vectors"].copy()
    if meta.get("format_version") != CCP_VERSION:
        raise CompatibilityError(f"unsupported CCP bank version {meta.get('format_version')!r}")
    if vectors.shape != (len(meta["classes"]), meta["dim"]):
        raise CompatibilityError("CCP bank matrix shape disagrees with its header")
    if expected_digest is not None and meta["digest"] != expected_digest:
        raise CompatibilityError(
            f"CCP bank was built for checkpoint {meta['digest'][:12]}, "
            f"not {expected_digest[:12]}")
    return CCPBank(vectors, tuple(meta["classes"]), tuple(meta["class_indices"]),
                   meta["best_epoch"], meta["n_episodes"], meta["digest"])
