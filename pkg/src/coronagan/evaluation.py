"""Perceptual hash value (PHV) scoring of virtual against real histology.

PHV feeds both images through a frozen convolutional feature extractor,
global-average-pools the stage-i feature maps, and reports the percentage
of channels whose pooled activations agree within a threshold T (higher =
more similar, 0..100). The default extractor is a deterministic seeded
3-stage CNN so scoring works offline; a pretrained residual-network
extractor (torchvision-layout weights exported to .npz, stages = the first
three residual layers) can be supplied via CORONAGAN_EXTRACTOR_PATH.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad

EXTRACTOR_PATH_ENV = "CORONAGAN_EXTRACTOR_PATH"
DEFAULT_THRESHOLD = 0.005
N_STAGES = 3

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize of a (C, H, W) array (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64)
    src_r = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    src_c = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0)[None, :, None]
    fc = (src_c - c0)[None, None, :]
    img = image.astype(np.float64)
    top = img[:, r0][:, :, c0] * (1 - fc) + img[:, r0][:, :, c1] * fc
    bot = img[:, r1][:, :, c0] * (1 - fc) + img[:, r1][:, :, c1] * fc
    return top * (1 - fr) + bot * fr


@dataclass
class ConvStage:
    weight: np.ndarray  # (Cout, Cin, k, k)
    bias: np.ndarray  # (Cout,)
    stride: int = 2
    activation: str = "tanh"


class CnnFeatureExtractor:
    """A frozen stack of conv stages exposing per-stage feature maps."""

    def __init__(self, stages: list[ConvStage], input_size: int, mean, std, name: str):
        if len(stages) != N_STAGES:
            raise ValueError(f"extractor needs exactly {N_STAGES} stages, got {len(stages)}")
        self.stages = stages
        self.input_size = input_size
        self.mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
        self.std = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
        self.name = name

    def stage_channels(self, i: int) -> int:
        return self.stages[_stage_index(i)].weight.shape[0]

    def prepare(self, image: np.ndarray) -> np.ndarray:
        image = _check_rgb(image)
        resized = bilinear_resize(image, self.input_size, self.input_size)
        return (resized - self.mean) / self.std

    def stage_features(self, image: np.ndarray, i: int) -> np.ndarray:
        """(C_i, h_i, w_i) feature map of stage i in {1,2,3} for an RGB image in [0,1]."""
        idx = _stage_index(i)
        x = self.prepare(image)[None]
        with no_grad():
            for stage in self.stages[: idx + 1]:
                pad = stage.weight.shape[2] // 2
                t = ad.conv2d(Tensor(x), Tensor(stage.weight), Tensor(stage.bias), stride=stage.stride, padding=pad)
                x = _activate(t.data, stage.activation)
        return x[0]


def seeded_fallback_extractor(seed: int = 0, input_size: int = 64, widths=(16, 32, 64)) -> CnnFeatureExtractor:
    """Deterministic random 3-stage CNN; weights scaled for unit-ish tanh inputs."""
    rng = np.random.default_rng([seed, 0x9E3779B9])
    stages = []
    cin = 3
    for cout in widths:
        scale = 1.0 / np.sqrt(9 * cin)
        w = rng.normal(0.0, scale, size=(cout, cin, 3, 3))
        b = rng.normal(0.0, 0.1, size=cout)
        stages.append(ConvStage(weight=w, bias=b, stride=2, activation="tanh"))
        cin = cout
    return CnnFeatureExtractor(stages, input_size=input_size, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), name=f"fallback-cnn(seed={seed})")


class ResNetStageExtractor:
    """Stage features from a pretrained residual classifier.

    Loads an .npz holding a torchvision-style state dict (conv1/bn1 stem
    plus layer1..layer3 bottleneck or basic blocks, names like
    `layer2.3.conv1.weight`); the block structure is inferred from the
    keys, so any depth in that layout loads. Stages 1..3 are the outputs
    of layer1..layer3.
    """

    def __init__(self, npz_path: str, input_size: int = 224):
        if not os.path.exists(npz_path):
            raise FileNotFoundError(
                f"extractor weights not found: {npz_path}. Export them with: "
                "python -c \"import numpy, torchvision; m = torchvision.models.resnet101(weights='IMAGENET1K_V1'); "
                "numpy.savez('resnet101.npz', **{k: v.numpy() for k, v in m.state_dict().items()})\" "
                f"and point {EXTRACTOR_PATH_ENV} at the file"
            )
        self.name = f"resnet-stages({os.path.basename(npz_path)})"
        self.input_size = input_size
        self.mean = np.asarray(IMAGENET_MEAN).reshape(3, 1, 1)
        self.std = np.asarray(IMAGENET_STD).reshape(3, 1, 1)
        with np.load(npz_path) as z:
            self.params = {k: np.asarray(z[k], dtype=np.float64) for k in z.files}
        self.layer_blocks = {}
        for layer in (1, 2, 3):
            n = 0
            while f"layer{layer}.{n}.conv1.weight" in self.params:
                n += 1
            if n == 0:
                raise ValueError(f"{npz_path}: no blocks found for layer{layer}; not a residual-classifier export?")
            self.layer_blocks[layer] = n

    def stage_channels(self, i: int) -> int:
        layer = _stage_index(i) + 1
        last = self.layer_blocks[layer] - 1
        convs = [k for k in self.params if k.startswith(f"layer{layer}.{last}.conv")]
        final = sorted(convs)[-1]
        return self.params[final].shape[0]

    def prepare(self, image: np.ndarray) -> np.ndarray:
        image = _check_rgb(image)
        resized = bilinear_resize(image, self.input_size, self.input_size)
        return (resized - self.mean) / self.std

    def stage_features(self, image: np.ndarray, i: int) -> np.ndarray:
        idx = _stage_index(i)
        x = self.prepare(image)[None]
        with no_grad():
            x = self._conv_bn_relu(x, "conv1", "bn1", stride=2)
            x = _maxpool2d(x, kernel=3, stride=2, padding=1)
            for layer in range(1, idx + 2):
                for block in range(self.layer_blocks[layer]):
                    x = self._block(x, f"layer{layer}.{block}", first=(block == 0), layer=layer)
        return x[0]

    def _conv(self, x, name, stride):
        w = self.params[f"{name}.weight"]
        pad = w.shape[2] // 2
        return ad.conv2d(Tensor(x), Tensor(w), None, stride=stride, padding=pad).data

    def _bn(self, x, name):
        gamma = self.params[f"{name}.weight"]
        beta = self.params[f"{name}.bias"]
        mean = self.params[f"{name}.running_mean"]
        var = self.params[f"{name}.running_var"]
        scale = gamma / np.sqrt(var + 1e-5)
        return x * scale.reshape(1, -1, 1, 1) + (beta - mean * scale).reshape(1, -1, 1, 1)

    def _conv_bn_relu(self, x, conv_name, bn_name, stride):
        return np.maximum(self._bn(self._conv(x, conv_name, stride), bn_name), 0.0)

    def _block(self, x, prefix, first, layer):
        stride = 2 if (first and layer > 1) else 1
        has_conv3 = f"{prefix}.conv3.weight" in self.params
        y = self._conv_bn_relu(x, f"{prefix}.conv1", f"{prefix}.bn1", stride=1 if has_conv3 else stride)
        y = self._conv_bn_relu(y, f"{prefix}.conv2", f"{prefix}.bn2", stride=stride if has_conv3 else 1)
        if has_conv3:
            y = self._bn(self._conv(y, f"{prefix}.conv3", 1), f"{prefix}.bn3")
        shortcut = x
        if f"{prefix}.downsample.0.weight" in self.params:
            shortcut = self._bn(self._conv(x, f"{prefix}.downsample.0", stride), f"{prefix}.downsample.1")
        return np.maximum(y + shortcut, 0.0)


def get_extractor(kind: str = "fallback", path: str | None = None, seed: int = 0):
    if kind == "fallback":
        return seeded_fallback_extractor(seed=seed)
    if kind == "resnet101":
        path = path or os.environ.get(EXTRACTOR_PATH_ENV)
        if not path:
            raise FileNotFoundError(
                f"no pretrained extractor configured: set {EXTRACTOR_PATH_ENV} to a torchvision-layout "
                ".npz export (see README) or use the fallback extractor"
            )
        return ResNetStageExtractor(path)
    raise ValueError(f"unknown extractor kind: {kind!r}")


# ---------------------------------------------------------------------------
# scoring


def pooled_features(extractor, image: np.ndarray, i: int) -> np.ndarray:
    """Spatial mean of each stage-i feature channel: a length-N vector."""
    feats = extractor.stage_features(image, i)
    return feats.mean(axis=(1, 2))


def phv(real: np.ndarray, virtual: np.ndarray, extractor, i: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Percentage of pooled stage-i channels with |difference| <= threshold."""
    real = _check_rgb(real)
    virtual = _check_rgb(virtual)
    if real.shape != virtual.shape:
        raise ValueError(f"image size mismatch: {real.shape} vs {virtual.shape}")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    diffs = np.abs(pooled_features(extractor, virtual, i) - pooled_features(extractor, real, i))
    return float(100.0 * np.mean(diffs <= threshold))


@dataclass
class PHVReport:
    phv_1: float
    phv_2: float
    phv_3: float
    T: float
    n_pairs: int
    pairing: str
    channel_abs_diff: dict = field(default_factory=dict)

    def __post_init__(self):
        for score in (self.phv_1, self.phv_2, self.phv_3):
            if not 0.0 <= score <= 100.0:
                raise ValueError(f"PHV scores must lie in [0, 100], got {score}")

    def to_json(self) -> str:
        payload = {
            "phv_1": self.phv_1,
            "phv_2": self.phv_2,
            "phv_3": self.phv_3,
            "T": self.T,
            "n_pairs": self.n_pairs,
            "pairing": self.pairing,
            "channel_abs_diff": self.channel_abs_diff,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def score_pairs(virtual_images, real_images, extractor, threshold: float = DEFAULT_THRESHOLD, pairing: str = "all") -> PHVReport:
    """Average phv over virtual/real pairs for stages 1..3.

    pairing 'all': every virtual image against every real image;
    pairing 'best': each virtual image against its highest-scoring real match
    (score from stage 1), averaged.
    """
    virtual_images = list(virtual_images)
    real_images = list(real_images)
    if not virtual_images or not real_images:
        raise ValueError("need at least one virtual and one real image")
    pooled_v = {i: [pooled_features(extractor, img, i) for img in virtual_images] for i in (1, 2, 3)}
    pooled_r = {i: [pooled_features(extractor, img, i) for img in real_images] for i in (1, 2, 3)}

    def stage_matrix(i):
        v = np.stack(pooled_v[i])  # (nv, N)
        r = np.stack(pooled_r[i])  # (nr, N)
        diffs = np.abs(v[:, None, :] - r[None, :, :])  # (nv, nr, N)
        return 100.0 * (diffs <= threshold).mean(axis=2), diffs

    scores = {}
    diagnostics = {}
    n_pairs = 0
    for i in (1, 2, 3):
        matrix, diffs = stage_matrix(i)
        if pairing == "all":
            scores[i] = float(matrix.mean())
            diagnostics[f"stage_{i}"] = diffs.mean(axis=(0, 1)).tolist()
            n_pairs = matrix.size
        elif pairing == "best":
            if i == 1:
                best = matrix.argmax(axis=1)
                scores_idx = best
            pick = matrix[np.arange(matrix.shape[0]), scores_idx]
            scores[i] = float(pick.mean())
            diagnostics[f"stage_{i}"] = diffs[np.arange(matrix.shape[0]), scores_idx].mean(axis=0).tolist()
            n_pairs = matrix.shape[0]
        else:
            raise ValueError(f"unknown pairing policy: {pairing!r}")
    return PHVReport(
        phv_1=scores[1],
        phv_2=scores[2],
        phv_3=scores[3],
        T=threshold,
        n_pairs=int(n_pairs),
        pairing=pairing,
        channel_abs_diff=diagnostics,
    )


def evaluate_testset(checkpoint_path: str, manifest_path: str, extractor, threshold: float = DEFAULT_THRESHOLD, pairing: str = "all") -> PHVReport:
    """Translate every OCT test image and score it against the real histology pool."""
    from . import imgio
    from .phantom import Domain, read_manifest
    from .training import load_checkpoint

    state = load_checkpoint(checkpoint_path)
    g_oh = state.model.g_oh
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = read_manifest(manifest_path)
    virtual, real = [], []
    with no_grad():
        for record in records:
            image = imgio.load_image(os.path.join(base, record["path"]))
            if Domain(record["domain"]) is Domain.OCT:
                fake, _ = g_oh(image[None].astype(g_oh.config.np_dtype))
                virtual.append(fake.data[0].astype(np.float64))
            else:
                real.append(image.astype(np.float64))
    if not virtual or not real:
        raise ValueError(f"{manifest_path}: need both OCT test images and real histology images")
    return score_pairs(virtual, real, extractor, threshold=threshold, pairing=pairing)


def _stage_index(i: int) -> int:
    if i not in (1, 2, 3):
        raise ValueError(f"stage index must be 1, 2, or 3, got {i}")
    return i - 1


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation: {kind!r}")


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if image.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[0]}")
    return image


def _maxpool2d(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, oh, ow, kernel, kernel),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return windows.max(axis=(4, 5))
