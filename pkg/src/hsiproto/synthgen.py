"""Labelled synthetic hypercubes with controllable class separability."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from hsiproto.cubeio import (
    DatasetManifest,
    HyperCube,
    LabeledCube,
    save_manifest,
    split_dataset,
    write_items,
)
from hsiproto.errors import SynthesisError

OUTLIER_NOISE_FACTOR = 5.0
BACKGROUND_SIGMA = 0.01


@dataclass(frozen=True)
class ClassSignature:
    index: int
    spectrum: np.ndarray
    spatial_texture_scale: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        spectrum = np.asarray(self.spectrum, dtype=np.float64)
        if spectrum.ndim != 1 or not np.all(np.isfinite(spectrum)):
            raise ValueError("spectrum must be a finite 1-D vector")
        if self.noise_sigma < 0 or self.spatial_texture_scale < 0:
            raise ValueError("noise_sigma and spatial_texture_scale must be >= 0")
        object.__setattr__(self, "spectrum", spectrum)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    cubes_per_class: int = 45
    height: int = 16
    width: int = 16
    channels: int = 32
    separation: float = 0.5
    class_spread: float = 1.5
    foreground_fill: float = 0.7
    noise_sigma: float = 0.05
    cube_jitter: float = 0.0
    texture_scale: float = 0.1
    outlier_rate: float = 0.0
    per_class_train: int = 30
    seed: int = 0
    # classes whose spectra are forced equal, e.g. ((6, 7),) for a chance-level check
    identical_pairs: tuple = ()

    def __post_init__(self):
        for name in ("num_classes", "cubes_per_class", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.foreground_fill <= 1:
            raise ValueError("foreground_fill must lie in (0, 1]")
        if not 0 <= self.outlier_rate <= 1:
            raise ValueError("outlier_rate must lie in [0, 1]")
        for name in ("separation", "class_spread", "noise_sigma", "cube_jitter",
                     "texture_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.per_class_train <= self.cubes_per_class:
            raise ValueError("per_class_train must lie in [0, cubes_per_class]")
        object.__setattr__(self, "identical_pairs",
                           tuple(tuple(int(k) for k in p) for p in self.identical_pairs))

    def class_names(self) -> list[str]:
        width = len(str(self.num_classes - 1))
        return [f"class{k:0{width}d}" for k in range(self.num_classes)]


def _smooth_curve(rng: np.random.Generator, channels: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, channels)
    curve = np.zeros(channels)
    for _ in range(rng.integers(2, 5)):
        centre, width = rng.uniform(0, 1), rng.uniform(0.05, 0.3)
        curve += rng.uniform(-1, 1) * np.exp(-0.5 * ((x - centre) / width) ** 2)
    return curve


def _unit_curve(rng: np.random.Generator, channels: int) -> np.ndarray:
    curve = _smooth_curve(rng, channels)
    curve -= curve.mean()
    norm = np.linalg.norm(curve)
    return curve / norm if norm > 0 else curve


def gen_signatures(config: SynthConfig, max_tries: int = 2000) -> list[ClassSignature]:
    """Shared base spectrum plus a smooth class-specific deviation per class.

    Deviations have L2 norm ``class_spread * separation`` (at least 0.05) and are
    redrawn until every pair of spectra is ``separation`` apart.
    """
    rng = np.random.default_rng([config.seed, 0x5167])
    base = 0.5 + 0.15 * _smooth_curve(rng, config.channels)
    scale = max(config.class_spread * config.separation, 0.05)
    alias = {b: a for a, b in config.identical_pairs}
    spectra: list[np.ndarray] = []
    closest = 0.0
    for k in range(config.num_classes):
        if k in alias:
            spectra.append(spectra[alias[k]].copy())
            continue
        for _ in range(max_tries):
            cand = np.clip(base + scale * rng.uniform(0.8, 1.2)
                           * _unit_curve(rng, config.channels), 0.0, 1.0)
            dists = [np.linalg.norm(cand - s) for j, s in enumerate(spectra) if j not in alias]
            if not dists or min(dists) >= config.separation:
                spectra.append(cand)
                break
            closest = max(closest, min(dists))
        else:
            raise SynthesisError(
                f"could not place class {k} at separation {config.separation} after "
                f"{max_tries} draws (best minimum distance achieved {closest:.4f})")
    return [ClassSignature(k, s, config.texture_scale, config.noise_sigma)
            for k, s in enumerate(spectra)]


def _unit_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    std = field.std()
    return (field - field.mean()) / std if std > 0 else np.zeros(shape)


def gen_mask(rng: np.random.Generator, height: int, width: int, fill: float) -> np.ndarray:
    """Blob-shaped foreground covering ``round(fill * H * W)`` pixels."""
    n_fg = int(round(fill * height * width))
    field = _unit_field(rng, (height, width), sigma=max(1.0, min(height, width) / 8))
    order = np.argsort(-field.ravel(), kind="stable")
    mask = np.zeros(height * width, dtype=bool)
    mask[order[:n_fg]] = True
    return mask.reshape(height, width)


def gen_cube(sig: ClassSignature, height: int, width: int, channels: int, seed,
             foreground_fill: float = 0.7, outlier: bool = False,
             label: str | None = None, ident: str | None = None,
             jitter: float = 0.0) -> LabeledCube:
    """One cube of class ``sig``.

    Foreground pixels are ``texture * (spectrum + cube offset) + noise``; the
    per-cube offset is a smooth spectral curve of L2 norm ``jitter``. Outlier
    cubes get their pixel noise multiplied by ``OUTLIER_NOISE_FACTOR``.
    """
    if sig.spectrum.size != channels:
        raise ValueError(f"signature has {sig.spectrum.size} channels, expected {channels}")
    rng = np.random.default_rng(seed)
    mask = gen_mask(rng, height, width, foreground_fill)
    factor = OUTLIER_NOISE_FACTOR if outlier else 1.0
    sigma = sig.noise_sigma * factor
    spectrum = sig.spectrum
    if jitter > 0:
        spectrum = spectrum + jitter * _unit_curve(rng, channels)

    texture = 1.0 + sig.spatial_texture_scale * _unit_field(
        rng, (height, width), sigma=max(1.0, min(height, width) / 4))
    data = texture[:, :, None] * spectrum[None, None, :]
    if sigma > 0:
        data = data + rng.normal(0.0, sigma, size=data.shape)
    background = np.zeros((height, width, channels))
    if sig.noise_sigma > 0:
        background = np.abs(rng.normal(0.0, BACKGROUND_SIGMA, size=background.shape))
    data = np.where(mask[:, :, None], data, background)

    name = label if label is not None else f"class{sig.index}"
    return LabeledCube(HyperCube(data.astype(np.float32), None, mask), name, sig.index,
                       ident if ident is not None else f"{name}_seed{seed}")


def gen_pool(config: SynthConfig,
             signatures: list[ClassSignature] | None = None) -> list[LabeledCube]:
    """All cubes of the configured dataset, in memory, class-major order."""
    sigs = signatures if signatures is not None else gen_signatures(config)
    names = config.class_names()
    pool = []
    for sig, i in itertools.product(sigs, range(config.cubes_per_class)):
        outlier = np.random.default_rng(
            [config.seed, sig.index, i, 1]).random() < config.outlier_rate
        pool.append(gen_cube(sig, config.height, config.width, config.channels,
                             [config.seed, sig.index, i],
                             config.foreground_fill, outlier, names[sig.index],
                             f"{names[sig.index]}_{i:04d}", config.cube_jitter))
    return pool


def gen_datasets(config: SynthConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """In-memory train/test split of the synthetic pool."""
    pool = gen_pool(config)
    return split_dataset(pool, config.per_class_train, config.seed, config.class_names(),
                         provenance=_provenance(config))


def _provenance(config: SynthConfig) -> dict:
    prov = {k: v for k, v in vars(config).items()}
    prov["identical_pairs"] = [list(p) for p in config.identical_pairs]
    return {"source": "synthgen", "synth": prov}


def gen_dataset(config: SynthConfig, root) -> tuple[DatasetManifest, DatasetManifest]:
    """Write the dataset under ``root`` and return its train/test manifests.

    Files: ``cubes/*.hsc`` plus ``pool.json``, ``train.json``, ``test.json``.
    """
    root = Path(root)
    pool = write_items(gen_pool(config), root / "cubes")
    names = tuple(config.class_names())
    save_manifest(DatasetManifest(names, pool, "all", _provenance(config), balanced=True),
                  root / "pool.json")
    train, test = split_dataset(pool, config.per_class_train, config.seed, names,
                                provenance=_provenance(config))
    save_manifest(train, root / "train.json")
    save_manifest(test, root / "test.json")
    return train, test


def with_overrides(config: SynthConfig, **kw) -> SynthConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
