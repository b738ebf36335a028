"""Embedding network: channel attention on raw bands, spectral downsampling,
and a small residual 2D CNN backbone.

The numpy functions (``se_squeeze``, ``se_excite``, ...) operate on single
cubes and are the reference semantics; ``EmbeddingNet`` is the batched torch
implementation used for training and inference.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import nn
from torch.nn import functional as F

from hsiproto.cubeio import HyperCube, save_npz
from hsiproto.errors import CompatibilityError, TrainingError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EmbedConfig:
    channels: int
    reduction: int = 16
    down_channels: int = 3
    widths: tuple = (16, 32)
    blocks_per_stage: int = 2
    embedding_dim: int = 64
    residual: bool = True
    squeeze: str = "avgmax"  # "avgmax" (mean+max)/2, or "avg" for plain global average
    attention: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.channels < 1 or self.reduction < 1 or self.down_channels < 1:
            raise ValueError("channels, reduction and down_channels must be >= 1")
        if not self.widths or min(self.widths) < 1 or self.blocks_per_stage < 1:
            raise ValueError("backbone needs at least one stage of width >= 1")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.squeeze not in ("avgmax", "avg"):
            raise ValueError(f"unknown squeeze mode {self.squeeze!r}")

    @property
    def reduced(self) -> int:
        return max(self.channels // self.reduction, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class SEParams:
    w1: np.ndarray  # (reduced, C)
    b1: np.ndarray
    w2: np.ndarray  # (C, reduced)
    b2: np.ndarray

    @classmethod
    def zeros(cls, channels: int, reduced: int) -> "SEParams":
        return cls(np.zeros((reduced, channels)), np.zeros(reduced),
                   np.zeros((channels, reduced)), np.zeros(channels))


@dataclass(frozen=True)
class DownsampleParams:
    weight: np.ndarray  # (C_out, C)
    bias: np.ndarray


# ---------------------------------------------------------------------------
# single-cube reference operations


def se_squeeze(cube: HyperCube) -> np.ndarray:
    """Per-channel average of the spatial mean and the spatial max."""
    data = cube.data.astype(np.float64)
    return 0.5 * (data.mean(axis=(0, 1)) + data.max(axis=(0, 1)))


def se_squeeze_avg_only(cube: HyperCube) -> np.ndarray:
    return cube.data.astype(np.float64).mean(axis=(0, 1))


def se_excite(z: np.ndarray, se: SEParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or se.w1.shape[1] != z.size or se.w2.shape[0] != z.size:
        raise ValueError(f"squeeze vector of length {z.size} does not fit SE weights "
                         f"{se.w1.shape} / {se.w2.shape}")
    hidden = np.maximum(se.w1 @ z + se.b1, 0.0)
    return expit(se.w2 @ hidden + se.b2)


def se_recalibrate(cube: HyperCube, s: np.ndarray) -> HyperCube:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (cube.channels,):
        raise ValueError(f"{s.size} attention weights for {cube.channels} channels")
    return HyperCube((cube.data * s).astype(np.float32), cube.band_centers, cube.mask)


def spectral_downsample(cube: HyperCube, down: DownsampleParams) -> np.ndarray:
    """Per-pixel affine projection to ``C_out`` channels, shape (H, W, C_out)."""
    if down.weight.shape[1] != cube.channels:
        raise ValueError(f"downsampler expects {down.weight.shape[1]} channels, "
                         f"cube has {cube.channels}")
    return cube.data.astype(np.float64) @ down.weight.T + down.bias


# ---------------------------------------------------------------------------
# torch modules


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int, squeeze: str = "avgmax"):
        super().__init__()
        self.squeeze_mode = squeeze
        self.fc1 = nn.Linear(channels, reduced)
        self.fc2 = nn.Linear(reduced, channels)

    def squeeze(self, x):
        avg = x.mean(dim=(2, 3))
        if self.squeeze_mode == "avg":
            return avg
        return 0.5 * (avg + x.amax(dim=(2, 3)))

    def weights(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(self.squeeze(x)))))

    def forward(self, x):
        s = self.weights(x)
        return x * s[:, :, None, None]

    def params(self) -> SEParams:
        def arr(t):
            return t.detach().double().numpy().copy()
        return SEParams(arr(self.fc1.weight), arr(self.fc1.bias),
                        arr(self.fc2.weight), arr(self.fc2.bias))

    def load_params(self, se: SEParams):
        with torch.no_grad():
            for mod, w, b in ((self.fc1, se.w1, se.b1), (self.fc2, se.w2, se.b2)):
                mod.weight.copy_(torch.as_tensor(w))
                mod.bias.copy_(torch.as_tensor(b))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, residual: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.residual = residual
        self.shortcut = None
        if residual and (stride != 1 or cin != cout):
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        if self.residual:
            out = out + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(out)


class EmbeddingNet(nn.Module):
    """attention (optional) -> 1x1 spectral downsample -> residual CNN -> GAP -> linear."""

    def __init__(self, config: EmbedConfig):
        super().__init__()
        self.config = config
        self.se = SqueezeExcite(config.channels, config.reduced, config.squeeze)
        self.down = nn.Conv2d(config.channels, config.down_channels, 1)
        self.stem = nn.Conv2d(config.down_channels, config.widths[0], 3, padding=1)
        blocks = []
        cin = config.widths[0]
        for si, width in enumerate(config.widths):
            for bi in range(config.blocks_per_stage):
                stride = 2 if si > 0 and bi == 0 else 1
                blocks.append(BasicBlock(cin, width, stride, config.residual))
                cin = width
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(cin, config.embedding_dim)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int):
        """He-uniform weights drawn from a seeded generator; zero biases."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for _, mod in self.named_modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    bound = (6.0 / fan_in) ** 0.5
                    mod.weight.copy_(
                        (torch.rand(mod.weight.shape, generator=gen, dtype=torch.float64)
                         * 2 - 1) * bound)
                    mod.bias.zero_()

    def _attention(self, attention):
        return self.config.attention if attention is None else attention

    def forward(self, x, attention: bool | None = None):
        if x.shape[1] != self.config.channels:
            raise ValueError(f"network expects {self.config.channels} channels, "
                             f"got {x.shape[1]}")
        if self._attention(attention):
            x = self.se(x)
        x = self.blocks(F.relu(self.stem(self.down(x))))
        return self.head(x.mean(dim=(2, 3)))

    def attention_weights(self, x):
        return self.se.weights(x)

    def down_params(self) -> DownsampleParams:
        w = self.down.weight.detach().double().numpy()[:, :, 0, 0].copy()
        return DownsampleParams(w, self.down.bias.detach().double().numpy().copy())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def digest(self) -> str:
        """Hash of the hyperparameters and every weight tensor."""
        h = hashlib.sha256(self.config.digest().encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
        return h.hexdigest()


def build_net(config: EmbedConfig) -> EmbeddingNet:
    return EmbeddingNet(config)


def cubes_to_tensor(cubes: Sequence[HyperCube], dtype=torch.float32) -> torch.Tensor:
    """Stack cubes into an (n, C, H, W) tensor."""
    if not cubes:
        raise ValueError("no cubes to stack")
    chans = {c.channels for c in cubes}
    if len(chans) != 1:
        raise ValueError(f"heterogeneous channel counts {sorted(chans)}")
    arr = np.stack([c.data for c in cubes]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _param_dtype(net: nn.Module):
    return next(net.parameters()).dtype


def embed(cube: HyperCube, params: EmbeddingNet, attention_enabled: bool | None = None):
    if cube.channels != params.config.channels:
        raise ValueError(f"cube has {cube.channels} channels, network expects "
                         f"{params.config.channels}")
    return embed_batch([cube], params, attention_enabled)[0]


def embed_batch(cubes: Sequence[HyperCube], params: EmbeddingNet,
                attention_enabled: bool | None = None, batch_size: int = 256) -> np.ndarray:
    """Embeddings of ``cubes`` as an (n, D) float array, input order preserved."""
    if len({c.channels for c in cubes}) > 1:
        raise ValueError("heterogeneous channel counts in batch")
    if not cubes:
        return np.zeros((0, params.config.embedding_dim), dtype=np.float32)
    dtype = _param_dtype(params)
    rows = []
    with torch.no_grad():
        start = 0
        while start < len(cubes):
            chunk = list(cubes[start:start + batch_size])
            shapes = {c.shape for c in chunk}
            if len(shapes) == 1:
                rows.append(params(cubes_to_tensor(chunk, dtype), attention_enabled))
            else:
                rows.extend(params(cubes_to_tensor([c], dtype), attention_enabled)
                            for c in chunk)
            start += batch_size
    return torch.cat(rows).numpy()


def attention_batch(cubes: Sequence[HyperCube], params: EmbeddingNet) -> np.ndarray:
    """Per-cube attention weights, shape (n, C)."""
    dtype = _param_dtype(params)
    with torch.no_grad():
        return torch.cat([params.attention_weights(cubes_to_tensor([c], dtype))
                          for c in cubes]).numpy()


def gradient(loss_fn: Callable, params: nn.Module, batch) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_fn(params, batch)`` for every named parameter."""
    named = list(params.named_parameters())
    loss = loss_fn(params, batch)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss)
    if not torch.isfinite(loss).all():
        raise TrainingError(f"loss is not finite ({loss.item()})")
    if not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {name: (torch.zeros_like(p) if g is None else g)
            for (name, p), g in zip(named, grads)}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: EmbeddingNet, path) -> str:
    """Write weights plus config to ``path`` (npz); returns the checkpoint digest."""
    digest = net.digest()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "config_digest": net.config.digest(),
        "digest": digest,
    }
    tensors = {f"t:{k}": v.detach().to(torch.float32).numpy()
               for k, v in net.state_dict().items()}
    save_npz(path, {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **tensors})
    return digest


def load_checkpoint(path, expected_digest: str | None = None) -> EmbeddingNet:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        tensors = {k[2:]: torch.from_numpy(npz[k].copy()) for k in npz.files
                   if k.startswith("t:")}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    config = EmbedConfig(**meta["config"])
    if config.digest() != meta["config_digest"]:
        raise CompatibilityError("checkpoint config digest does not match its config")
    net = EmbeddingNet(config)
    net.load_state_dict(tensors)
    if net.digest() != meta["digest"]:
        raise CompatibilityError("checkpoint weights do not match the stored digest")
    if expected_digest is not None and expected_digest != meta["digest"]:
        raise CompatibilityError(
            f"checkpoint digest {meta['digest'][:12]} != expected {expected_digest[:12]}")
    return net
