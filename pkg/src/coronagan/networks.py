"""Translation networks: generators, patch discriminators, structure heads.

Each generator is an encoder (7x7 stem + stride-2 downsampling convs), a
residual trunk, and a decoder (stride-2 transpose convs + 7x7 output conv
with a sigmoid into [0,1]). The embedding handed to the decoder is the same
tensor the structure head classifies, so the layer constraint binds the
generative path. Discriminators follow the 70x70 patch design: stride-2
width-doubling 4x4 convs, a stride-1 width layer, then a 1-channel conv.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d, ConvTranspose2d, InstanceNorm2d, Module, ModuleList

N_LAYER_CLASSES = 3


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int
    out_channels: int
    base_width: int = 64
    n_resblocks: int = 5
    n_down: int = 3
    width_cap: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.base_width < 1 or self.n_down < 1 or self.n_resblocks < 0:
            raise ValueError("base_width and n_down must be positive, n_resblocks non-negative")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def downscale(self) -> int:
        return 2**self.n_down

    def stage_widths(self) -> list[int]:
        """Channel widths after the stem and after each downsampling conv."""
        widths = [self.base_width]
        for i in range(1, self.n_down + 1):
            widths.append(min(self.base_width * 2**i, self.width_cap))
        return widths

    @property
    def embedding_channels(self) -> int:
        return self.stage_widths()[-1]

    def embedding_shape(self, height: int, width: int) -> tuple[int, int, int]:
        d = self.downscale
        if height % d or width % d:
            raise ValueError(f"spatial dims {(height, width)} must be divisible by {d}")
        return (self.embedding_channels, height // d, width // d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int
    base_width: int = 64
    n_layers: int = 3
    leaky_slope: float = 0.2
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def score_map_shape(self, height: int, width: int) -> tuple[int, int, int]:
        """Output dims from layer arithmetic (k=4, p=1; n stride-2 then two stride-1)."""
        h, w = height, width
        for _ in range(self.n_layers):
            h, w = h // 2, w // 2
        h, w = h - 1, w - 1
        h, w = h - 1, w - 1
        if h <= 0 or w <= 0:
            raise ValueError(f"input {height}x{width} too small for {self.n_layers}-layer discriminator")
        return (1, h, w)


class ResidualBlock(Module):
    """conv-IN-relu-conv-IN plus identity skip; edge-reflected 3x3 convs."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, pad_mode="symmetric", dtype=dtype)
        self.norm1 = InstanceNorm2d()
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, pad_mode="symmetric", dtype=dtype)
        self.norm2 = InstanceNorm2d()

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return x + y


class Generator(Module):
    """Encoder + residual trunk + decoder; forward returns (image, embedding)."""

    def __init__(self, config: GeneratorConfig, seed: int):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        widths = config.stage_widths()

        self.stem = Conv2d(config.in_channels, widths[0], 7, rng, padding=3, pad_mode="symmetric", dtype=dtype)
        self.stem_norm = InstanceNorm2d()
        downs = []
        for i in range(config.n_down):
            downs.append(Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1, dtype=dtype))
        self.downs = ModuleList(downs)
        self.down_norms = ModuleList([InstanceNorm2d() for _ in range(config.n_down)])
        self.trunk = ModuleList([ResidualBlock(widths[-1], rng, dtype) for _ in range(config.n_resblocks)])
        ups = []
        for i in range(config.n_down, 0, -1):
            ups.append(ConvTranspose2d(widths[i], widths[i - 1], 3, rng, dtype=dtype))
        self.ups = ModuleList(ups)
        self.up_norms = ModuleList([InstanceNorm2d() for _ in range(config.n_down)])
        self.head = Conv2d(widths[0], config.out_channels, 7, rng, padding=3, pad_mode="symmetric", dtype=dtype)

    def encode(self, image) -> Tensor:
        x = ad.as_tensor(image)
        if x.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) batch, got shape {x.shape}")
        _, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        d = self.config.downscale
        if h % d or w % d:
            raise ValueError(f"spatial dims {(h, w)} must be divisible by {d}")
        x = ad.relu(self.stem_norm(self.stem(x)))
        for conv, norm in zip(self.downs, self.down_norms):
            x = ad.relu(norm(conv(x)))
        for block in self.trunk:
            x = block(x)
        return x

    def decode(self, emb) -> Tensor:
        x = ad.as_tensor(emb)
        if x.ndim != 4 or x.shape[1] != self.config.embedding_channels:
            raise ValueError(
                f"expected embedding with {self.config.embedding_channels} channels, got shape {x.shape}"
            )
        for conv, norm in zip(self.ups, self.up_norms):
            x = ad.relu(norm(conv(x)))
        return ad.sigmoid(self.head(x))

    def __call__(self, image) -> tuple[Tensor, Tensor]:
        emb = self.encode(image)
        return self.decode(emb), emb


class StructureHead(Module):
    """Per-pixel layer classifier on the generator embedding."""

    def __init__(self, emb_channels: int, seed: int, n_classes: int = N_LAYER_CLASSES, dtype=np.float32):
        super().__init__()
        self.emb_channels = emb_channels
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        self.conv = Conv2d(emb_channels, n_classes, 3, rng, padding=1, dtype=dtype)

    def __call__(self, emb) -> Tensor:
        x = ad.as_tensor(emb)
        if x.ndim != 4 or x.shape[1] != self.emb_channels:
            raise ValueError(f"expected embedding with {self.emb_channels} channels, got shape {x.shape}")
        return self.conv(x)


class Discriminator(Module):
    """Fully convolutional grid of realness scores (patch discriminator)."""

    def __init__(self, config: DiscriminatorConfig, seed: int):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        layers = []
        width = config.base_width
        layers.append(Conv2d(config.in_channels, width, 4, rng, stride=2, padding=1, dtype=dtype))
        for _ in range(config.n_layers - 1):
            layers.append(Conv2d(width, width * 2, 4, rng, stride=2, padding=1, dtype=dtype))
            width *= 2
        layers.append(Conv2d(width, width * 2, 4, rng, stride=1, padding=1, dtype=dtype))
        width *= 2
        self.convs = ModuleList(layers)
        self.norms = ModuleList([InstanceNorm2d() for _ in range(len(layers) - 1)])
        self.final = Conv2d(width, 1, 4, rng, stride=1, padding=1, dtype=dtype)

    def __call__(self, image) -> Tensor:
        x = ad.as_tensor(image)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels}-channel input, got shape {x.shape}")
        slope = self.config.leaky_slope
        x = ad.leaky_relu(self.convs[0](x), slope)
        for conv, norm in zip(list(self.convs)[1:], self.norms):
            x = ad.leaky_relu(norm(conv(x)), slope)
        return self.final(x)


# ---------------------------------------------------------------------------
# tensor archive: JSON manifest (name -> shape/dtype/offset) + one LE blob

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}
ARCHIVE_FORMAT = "coronagan-tensors-v1"


def write_tensor_archive(tensors: dict[str, np.ndarray], manifest_path: str, blob_path: str, extra: dict | None = None) -> None:
    entries = {}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPE_CODES:
            raise ValueError(f"unsupported tensor dtype {dtype_name} for {name}")
        raw = arr.astype(_DTYPE_CODES[dtype_name]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": dtype_name, "offset": offset}
        offset += len(raw)
        chunks.append(raw)
    manifest = {"format": ARCHIVE_FORMAT, "byte_order": "little", "nbytes": offset, "tensors": entries}
    if extra:
        manifest.update(extra)
    with open(blob_path, "wb") as f:
        f.write(b"".join(chunks))
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, manifest_path)


def read_tensor_archive(manifest_path: str, blob_path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{manifest_path}: not a {ARCHIVE_FORMAT} manifest")
    with open(blob_path, "rb") as f:
        blob = f.read()
    if len(blob) != manifest["nbytes"]:
        raise ValueError(f"{blob_path}: expected {manifest['nbytes']} bytes, found {len(blob)}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        code = _DTYPE_CODES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=code, count=count, offset=entry["offset"])
        tensors[name] = arr.reshape(shape).astype(entry["dtype"])
    meta = {k: v for k, v in manifest.items() if k not in ("format", "byte_order", "nbytes", "tensors")}
    return tensors, meta
