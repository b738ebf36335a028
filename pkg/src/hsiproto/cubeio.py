"""Hypercube data model, on-disk format and the ingestion pipeline.

On-disk layout of a cube named ``foo``::

    foo.hsc        raw payload, band sequential (channel, row, col), <f4
    foo.hsc.json   sidecar metadata
    foo.hsc.mask   optional foreground mask, packed bits, row-major

Manifests are JSON documents listing the class registry and the
``(path, label)`` entries of one split.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hsiproto.errors import CubeFormatError

FORMAT_VERSION = 1
MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class HyperCube:
    """A ``height x width x channels`` reflectance raster.

    ``data`` is indexed ``(row, col, channel)`` and stored as float32.
    ``mask`` marks grain-kernel foreground pixels.
    """

    data: np.ndarray
    band_centers: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (H, W, C), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"cube dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube data contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

        if self.band_centers is not None:
            bc = np.asarray(self.band_centers, dtype=np.float64)
            if bc.shape != (data.shape[2],):
                raise ValueError(
                    f"band_centers has length {bc.size}, expected {data.shape[2]}")
            if bc.size > 1 and not np.all(np.diff(bc) > 0):
                raise ValueError("band_centers must be strictly increasing")
            bc.setflags(write=False)
            object.__setattr__(self, "band_centers", bc)

        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match raster {data.shape[:2]}")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def foreground_fraction(self) -> float:
        if self.mask is None:
            raise ValueError("cube carries no mask")
        return float(self.mask.mean())

    def equals(self, other: "HyperCube") -> bool:
        """Bit-exact comparison of raster, band centers and mask."""
        if self.data.shape != other.data.shape:
            return False
        if self.data.tobytes() != other.data.tobytes():
            return False
        for a, b in ((self.band_centers, other.band_centers), (self.mask, other.mask)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass(frozen=True, eq=False)
class LabeledCube:
    """A cube with its class label, registry index and a unique identifier."""

    cube: HyperCube
    label: str
    index: int
    ident: str
    path: Path | None = None


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """One split of a dataset: a class registry and its labelled cubes."""

    classes: tuple[str, ...]
    items: tuple[LabeledCube, ...]
    split: str = "all"
    provenance: dict = field(default_factory=dict)
    balanced: bool = False

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "items", tuple(self.items))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class registry contains duplicates")
        lookup = {name: k for k, name in enumerate(self.classes)}
        seen = set()
        for item in self.items:
            if lookup.get(item.label) != item.index:
                raise ValueError(
                    f"{item.ident}: label {item.label!r} with index {item.index} "
                    "is inconsistent with the class registry")
            if item.ident in seen:
                raise ValueError(f"duplicate cube identifier {item.ident!r}")
            seen.add(item.ident)
        if self.balanced:
            counts = {c: n for c, n in self.counts().items() if n}
            if len(set(counts.values())) > 1:
                raise ValueError(f"manifest declared balanced but counts differ: {counts}")

    def __len__(self):
        return len(self.items)

    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in self.classes}
        for item in self.items:
            out[item.label] += 1
        return out

    def by_class(self) -> dict[str, list[LabeledCube]]:
        out: dict[str, list[LabeledCube]] = {c: [] for c in self.classes}
        for item in self.items:
            out[item.label].append(item)
        return out

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; registry is {list(self.classes)}") from None

    def select(self, classes: Iterable[str]) -> "DatasetManifest":
        """Keep only items of ``classes``; the registry is unchanged."""
        keep = set(classes)
        for name in keep:
            self.class_index(name)
        return replace(self, items=tuple(i for i in self.items if i.label in keep),
                       balanced=False)

    def exclude(self, classes: Iterable[str]) -> "DatasetManifest":
        drop = set(classes)
        for name in drop:
            self.class_index(name)
        return self.select(c for c in self.classes if c not in drop)

    @property
    def channels(self) -> int:
        chans = {item.cube.channels for item in self.items}
        if len(chans) != 1:
            raise ValueError(f"manifest has heterogeneous channel counts {sorted(chans)}")
        return chans.pop()


# ---------------------------------------------------------------------------
# file format


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _maskfile(path: Path) -> Path:
    return path.with_name(path.name + ".mask")


def save_npz(path, arrays: dict) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def save_cube(cube: HyperCube, path, label: str | None = None) -> None:
    if path is None or str(path) == "":
        raise OSError("empty destination path")
    path = Path(path)
    payload = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1)), dtype="<f4")
    meta = {
        "format_version": FORMAT_VERSION,
        "height": cube.height,
        "width": cube.width,
        "channels": cube.channels,
    }
    if cube.band_centers is not None:
        meta["band_centers"] = [float(x) for x in cube.band_centers]
    if cube.mask is not None:
        meta["mask_file"] = _maskfile(path).name
    if label is not None:
        meta["label"] = label
    path.write_bytes(payload.tobytes())
    if cube.mask is not None:
        _maskfile(path).write_bytes(np.packbits(cube.mask.ravel()).tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_cube_label(path) -> str | None:
    return _read_meta(Path(path)).get("label")


def _read_meta(path: Path) -> dict:
    side = _sidecar(path)
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CubeFormatError("header", f"{side} is not valid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise CubeFormatError("header", f"{side} must hold a JSON object")
    return meta


def _dim(meta: dict, key: str) -> int:
    value = meta.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise CubeFormatError(key, f"expected a positive integer, got {value!r}")
    return value


def load_cube(path) -> HyperCube:
    path = Path(path)
    meta = _read_meta(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CubeFormatError("format_version",
                              f"unsupported version {meta.get('format_version')!r}")
    h, w, c = _dim(meta, "height"), _dim(meta, "width"), _dim(meta, "channels")
    raw = path.read_bytes()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise CubeFormatError(
            "channels",
            f"payload has {len(raw)} bytes, header declares {h}x{w}x{c} ({expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).transpose(1, 2, 0)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError("data", "payload contains non-finite values")

    band_centers = meta.get("band_centers")
    if band_centers is not None:
        band_centers = np.asarray(band_centers, dtype=np.float64)
        if band_centers.shape != (c,) or (c > 1 and not np.all(np.diff(band_centers) > 0)):
            raise CubeFormatError("band_centers",
                                  "must list one strictly increasing value per channel")

    mask = None
    if meta.get("mask_file"):
        mpath = path.with_name(meta["mask_file"])
        packed = np.frombuffer(mpath.read_bytes(), dtype=np.uint8)
        if packed.size != (h * w + 7) // 8:
            raise CubeFormatError("mask_file", f"{mpath.name} holds {packed.size} bytes, "
                                  f"expected {(h * w + 7) // 8}")
        mask = np.unpackbits(packed, count=h * w).reshape(h, w).astype(bool)

    return HyperCube(np.array(data, dtype=np.float32), band_centers, mask)


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write ``manifest``; entry paths are stored relative to its directory."""
    path = Path(path)
    base = path.parent.resolve()
    entries = []
    for item in manifest.items:
        if item.path is None:
            raise ValueError(f"{item.ident}: cube has no file; write it before the manifest")
        entries.append({
            "ident": item.ident,
            "label": item.label,
            "path": os.path.relpath(Path(item.path).resolve(), base),
        })
    doc = {
        "format_version": MANIFEST_VERSION,
        "split": manifest.split,
        "balanced": manifest.balanced,
        "classes": list(manifest.classes),
        "provenance": manifest.provenance,
        "entries": entries,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format_version") != MANIFEST_VERSION:
        raise CubeFormatError("format_version",
                              f"unsupported manifest version {doc.get('format_version')!r}")
    classes = tuple(doc["classes"])
    lookup = {c: k for k, c in enumerate(classes)}
    items = []
    for entry in doc["entries"]:
        if entry["label"] not in lookup:
            raise CubeFormatError("label", f"{entry['path']}: label {entry['label']!r} "
                                  "not in class registry")
        cpath = path.parent / entry["path"]
        if not cpath.exists():
            raise FileNotFoundError(f"manifest {path} references missing cube {cpath}")
        items.append(LabeledCube(load_cube(cpath), entry["label"], lookup[entry["label"]],
                                 entry.get("ident", entry["path"]), cpath))
    return DatasetManifest(classes, items, doc.get("split", "all"),
                           doc.get("provenance", {}), bool(doc.get("balanced", False)))


def write_items(items: Sequence[LabeledCube], directory) -> list[LabeledCube]:
    """Save every cube under ``directory`` and return items carrying their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for item in items:
        fname = item.ident.replace("/", "_").replace("@", "_") + ".hsc"
        fpath = directory / fname
        save_cube(item.cube, fpath, label=item.label)
        out.append(replace(item, path=fpath))
    return out


# ---------------------------------------------------------------------------
# preparation pipeline


def trim_channels(cube: HyperCube, head: int, tail: int) -> HyperCube:
    """Drop ``head`` leading and ``tail`` trailing spectral channels."""
    if head < 0 or tail < 0:
        raise ValueError("head and tail must be non-negative")
    if head + tail >= cube.channels:
        raise ValueError(
            f"cannot trim {head}+{tail} channels from a {cube.channels}-channel cube")
    stop = cube.channels - tail
    bc = None if cube.band_centers is None else cube.band_centers[head:stop]
    return HyperCube(cube.data[:, :, head:stop], bc, cube.mask)


def average_reduce_channels(cube: HyperCube, factor: int) -> HyperCube:
    """Average each run of ``factor`` consecutive channels into one."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if cube.channels % factor:
        raise ValueError(f"factor {factor} does not divide {cube.channels} channels")
    if factor == 1:
        return cube
    h, w, c = cube.shape
    grouped = cube.data.astype(np.float64).reshape(h, w, c // factor, factor)
    data = grouped.mean(axis=3)
    bc = None
    if cube.band_centers is not None:
        bc = cube.band_centers.reshape(-1, factor).mean(axis=1)
    return HyperCube(data.astype(np.float32), bc, cube.mask)


def window_offsets(height: int, width: int, window: int, stride: int) -> list[tuple[int, int]]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window < 1 or window > height or window > width:
        raise ValueError(f"window {window} does not fit a {height}x{width} cube")
    rows = range(0, height - window + 1, stride)
    cols = range(0, width - window + 1, stride)
    return [(r, c) for r in rows for c in cols]


def crop_windows(cube: HyperCube, window: int, stride: int) -> list[HyperCube]:
    """Full-fit square windows in row-major offset order."""
    out = []
    for r, c in window_offsets(cube.height, cube.width, window, stride):
        mask = None if cube.mask is None else cube.mask[r:r + window, c:c + window]
        out.append(HyperCube(cube.data[r:r + window, c:c + window], cube.band_centers, mask))
    return out


def density_filter(crops: Sequence[HyperCube], threshold: float) -> list[HyperCube]:
    """Keep crops whose foreground fraction is at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    for i, crop in enumerate(crops):
        if crop.mask is None:
            raise ValueError(f"crop {i} carries no foreground mask")
    return [crop for crop in crops if crop.foreground_fraction() >= threshold]


def minmax_scale(cube: HyperCube) -> HyperCube:
    """Rescale the whole raster to [0, 1]; constant cubes map to zeros."""
    lo, hi = float(cube.data.min()), float(cube.data.max())
    if hi == lo:
        data = np.zeros_like(cube.data)
    else:
        data = (cube.data.astype(np.float64) - lo) / (hi - lo)
    return HyperCube(data.astype(np.float32), cube.band_centers, cube.mask)


def registry_of(pool: Sequence[LabeledCube]) -> tuple[str, ...]:
    names: dict[int, str] = {}
    for item in pool:
        if names.setdefault(item.index, item.label) != item.label:
            raise ValueError(f"class index {item.index} used by two labels")
    if sorted(names) != list(range(len(names))):
        raise ValueError(f"class indices {sorted(names)} are not contiguous from 0")
    return tuple(names[k] for k in range(len(names)))


def split_dataset(pool: Sequence[LabeledCube], per_class_train: int, seed: int,
                  classes: Sequence[str] | None = None,
                  provenance: dict | None = None) -> tuple[DatasetManifest, DatasetManifest]:
    """Randomly draw ``per_class_train`` cubes per class for training.

    The remainder forms the test split. Both splits keep the pool's order.
    """
    registry = tuple(classes) if classes is not None else registry_of(pool)
    members: dict[str, list[int]] = defaultdict(list)
    for pos, item in enumerate(pool):
        members[item.label].append(pos)
    rng = np.random.default_rng(seed)
    chosen = set()
    for name in registry:
        have = len(members[name])
        if have < per_class_train:
            raise ValueError(
                f"class {name!r} has {have} cubes, fewer than per_class_train={per_class_train}")
        picked = rng.choice(have, size=per_class_train, replace=False)
        chosen.update(members[name][i] for i in picked)
    prov = dict(provenance or {})
    prov.update({"per_class_train": per_class_train, "split_seed": seed})
    train = [item for pos, item in enumerate(pool) if pos in chosen]
    test = [item for pos, item in enumerate(pool) if pos not in chosen]
    return (DatasetManifest(registry, train, "train", prov, balanced=True),
            DatasetManifest(registry, test, "test", prov))


@dataclass(frozen=True)
class PrepParams:
    trim_head: int = 10
    trim_tail: int = 10
    reduce_factor: int = 1
    window: int = 128
    stride: int = 64
    density_threshold: float = 0.5
    per_class_train: int = 360
    minmax: bool = False
    seed: int = 0


def prepare_pool(sources: Sequence[LabeledCube], params: PrepParams) -> list[LabeledCube]:
    """trim -> reduce -> (scale) -> crop -> density filter, for every source cube."""
    out = []
    for src in sources:
        cube = trim_channels(src.cube, params.trim_head, params.trim_tail)
        cube = average_reduce_channels(cube, params.reduce_factor)
        if params.minmax:
            cube = minmax_scale(cube)
        offsets = window_offsets(cube.height, cube.width, params.window, params.stride)
        crops = crop_windows(cube, params.window, params.stride)
        for (r, c), crop in zip(offsets, crops):
            if crop.mask is None:
                raise ValueError(f"{src.ident}: density filtering needs a foreground mask")
            if crop.foreground_fraction() >= params.density_threshold:
                out.append(LabeledCube(crop, src.label, src.index, f"{src.ident}@r{r}c{c}"))
    return out
