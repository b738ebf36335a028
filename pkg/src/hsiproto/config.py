"""Run configuration: one JSON document with per-section defaults, plus flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from hsiproto.attnembed import EmbedConfig
from hsiproto.cubeio import PrepParams
from hsiproto.fewshot import TrainHyper
from hsiproto.synthgen import SynthConfig

PROTOCOLS = ("complete", "partial-s1", "partial-s2")


@dataclass(frozen=True)
class PathsConfig:
    out: str = "run"

    @property
    def root(self) -> Path:
        return Path(self.out)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def prepared(self) -> Path:
        return self.root / "prepared"

    @property
    def model(self) -> Path:
        return self.root / "model"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def results(self) -> Path:
        return self.root / "results"


@dataclass(frozen=True)
class ModelConfig:
    down_channels: int = 3
    reduction: int = 16
    widths: tuple = (16, 32)
    blocks_per_stage: int = 2
    embedding_dim: int = 64
    residual: bool = True
    squeeze: str = "avgmax"
    attention: bool = True

    def embed_config(self, channels: int, seed: int) -> EmbedConfig:
        return EmbedConfig(channels=channels, reduction=self.reduction,
                           down_channels=self.down_channels, widths=tuple(self.widths),
                           blocks_per_stage=self.blocks_per_stage,
                           embedding_dim=self.embedding_dim, residual=self.residual,
                           squeeze=self.squeeze, attention=self.attention, seed=seed)


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "complete"
    exclude: tuple = ()
    repetitions: int = 20
    shot: int = 5


def _synth_default():
    return SynthConfig(cube_jitter=0.1)


def _prep_default():
    # synthetic cubes are already window-sized: one crop per cube
    return PrepParams(trim_head=0, trim_tail=0, window=16, stride=16, per_class_train=30)


def _train_default():
    return TrainHyper(epochs=30, lr=1e-3)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=_synth_default)
    prep: PrepParams = field(default_factory=_prep_default)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=_train_default)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def channels(self) -> int:
        """Channel count seen by the network after trimming and reduction."""
        return (self.synth.channels - self.prep.trim_head - self.prep.trim_tail) \
            // self.prep.reduce_factor

    @property
    def trained_classes(self) -> tuple:
        return tuple(c for c in self.synth.class_names() if c not in self.eval.exclude)

    def validate(self) -> "RunConfig":
        """Check parameter ranges and combinations; raises ValueError."""
        s, p, e, t = self.synth, self.prep, self.eval, self.train
        usable = s.channels - p.trim_head - p.trim_tail
        if p.trim_head < 0 or p.trim_tail < 0 or usable < 1:
            raise ValueError(f"trimming {p.trim_head}+{p.trim_tail} of {s.channels} channels "
                             "leaves none")
        if p.reduce_factor < 1 or usable % p.reduce_factor:
            raise ValueError(f"reduce factor {p.reduce_factor} does not divide the "
                             f"{usable} channels left after trimming")
        if not 1 <= p.window <= min(s.height, s.width) or p.stride < 1:
            raise ValueError(f"window {p.window}/stride {p.stride} does not fit "
                             f"{s.height}x{s.width} cubes")
        if not 0 <= p.density_threshold <= 1:
            raise ValueError("density threshold must lie in [0, 1]")
        if p.per_class_train % (t.shot + t.query):
            raise ValueError(f"per_class_train={p.per_class_train} is not a multiple of "
                             f"shot+query={t.shot + t.query}")
        if e.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {e.protocol!r}")
        unknown = set(e.exclude) - set(s.class_names())
        if unknown:
            raise ValueError(f"excluded classes {sorted(unknown)} are not in "
                             f"{s.class_names()}")
        if e.protocol != "complete" and not e.exclude:
            raise ValueError(f"protocol {e.protocol} needs --exclude")
        if len(self.trained_classes) < 2:
            raise ValueError("at least two classes must remain for training")
        if t.way is not None and t.way != len(self.trained_classes):
            raise ValueError(f"way={t.way} but {len(self.trained_classes)} classes are trained")
        if e.repetitions < 1 or e.shot < 1:
            raise ValueError("repetitions and shot must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["identical_pairs"] = [list(x) for x in self.synth.identical_pairs]
        d["model"]["widths"] = list(self.model.widths)
        d["eval"]["exclude"] = list(self.eval.exclude)
        d["train"] = self.train.to_dict()
        return d


_SECTIONS = {"paths": PathsConfig, "synth": SynthConfig, "prep": PrepParams,
             "model": ModelConfig, "train": TrainHyper, "eval": EvalConfig}
_TUPLES = {("model", "widths"), ("eval", "exclude"), ("train", "classes"),
           ("synth", "identical_pairs")}


def _section(name: str, base, values: dict):
    allowed = {f.name for f in fields(base)}
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = dict(values)
    for key in values:
        if (name, key) in _TUPLES and values[key] is not None:
            values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in values[key])
    return replace(base, **values)


def from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    updates = {name: _section(name, getattr(cfg, name), doc[name])
               for name in _SECTIONS if name in doc}
    if "seed" in doc:
        updates["seed"] = int(doc["seed"])
    return replace(cfg, **updates)


def load_config(path) -> RunConfig:
    return from_dict(json.loads(Path(path).read_text()))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate one seed to every stochastic stage."""
    return replace(cfg, seed=seed, synth=replace(cfg.synth, seed=seed),
                   prep=replace(cfg.prep, seed=seed), train=replace(cfg.train, seed=seed))
